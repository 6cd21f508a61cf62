//! Simulated agent behaviour.
//!
//! Outputs are pure functions of the run seed, the call's identity and its
//! argument values (plus managed state for stateful agents), so a call
//! produces the same payload wherever and whenever it executes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ContentDigest, Location, Payload, SessionId, Target};
use crate::state::{StateKind, StateLayer};

pub struct CallContext<'a> {
    pub seed: u64,
    pub session: SessionId,
    pub target: &'a Target,
    pub label: &'a str,
    pub args: &'a [Payload],
    pub instance: &'a Location,
}

impl CallContext<'_> {
    /// RNG keyed by the call identity and a purpose tag.
    pub fn rng(&self, purpose: &str) -> ChaCha8Rng {
        let key = format!("{}/{}/{}/{purpose}", self.seed, self.session, self.label);
        ChaCha8Rng::seed_from_u64(ContentDigest::of(key.as_bytes()).prefix_u64())
    }

    /// RNG keyed by the session alone.
    pub fn session_rng(&self, purpose: &str) -> ChaCha8Rng {
        let key = format!("{}/{}/{purpose}", self.seed, self.session);
        ChaCha8Rng::seed_from_u64(ContentDigest::of(key.as_bytes()).prefix_u64())
    }

    fn input_digest(&self) -> ContentDigest {
        let mut buf = Vec::new();
        buf.extend_from_slice(self.target.to_string().as_bytes());
        buf.push(0);
        buf.extend_from_slice(self.label.as_bytes());
        for a in self.args {
            buf.push(0);
            buf.extend_from_slice(&a.digest().0);
        }
        ContentDigest::of(&buf)
    }
}

pub trait AgentLogic: Send + Sync {
    /// Computes the call's output. `state` is the executing instance's state
    /// layer, passed only for managed-state agents.
    fn call(
        &self,
        ctx: &CallContext<'_>,
        state: Option<&mut StateLayer>,
    ) -> Result<Payload, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutputModel {
    /// `ok|<digest>`
    Echo,
    /// `count=<n>|<digest>` with n uniform in `[min, max]`.
    Count { min: u32, max: u32 },
    /// `<option>|<digest>` drawn by weight.
    Choice {
        options: Vec<String>,
        weights: Vec<f64>,
    },
    /// `fail|<digest>` with probability `p_fail`, else `pass|<digest>`.
    /// A `hard_fraction` of sessions, drawn once per session, fail with
    /// `hard_p_fail` instead.
    PassFail {
        p_fail: f64,
        #[serde(default)]
        hard_fraction: f64,
        #[serde(default)]
        hard_p_fail: f64,
    },
    /// The call errors out with probability `p`, else behaves like `Echo`.
    Fault { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodLogic {
    #[serde(flatten)]
    pub output: OutputModel,
    /// Append each call to the session's managed `history` list and fold the
    /// history into the output.
    #[serde(default)]
    pub history: bool,
}

/// Table-driven logic keyed by `agent.method`; unknown methods echo.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptedLogic {
    pub methods: BTreeMap<String, MethodLogic>,
}

impl ScriptedLogic {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, output: OutputModel, history: bool) -> Self {
        self.methods
            .insert(key.to_string(), MethodLogic { output, history });
        self
    }
}

impl OutputModel {
    /// Returns the offending field and reason on error.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let prob = |f: &'static str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err((f, format!("{p} is not a probability")))
            }
        };
        match self {
            OutputModel::Echo => Ok(()),
            OutputModel::Count { min, max } => {
                if min > max {
                    Err(("min", format!("{min} exceeds max {max}")))
                } else {
                    Ok(())
                }
            }
            OutputModel::Choice { options, weights } => {
                if options.is_empty() || options.len() != weights.len() {
                    Err(("weights", "needs one weight per option".into()))
                } else if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
                    || weights.iter().sum::<f64>() <= 0.0
                {
                    Err(("weights", "must be non-negative with a positive sum".into()))
                } else {
                    Ok(())
                }
            }
            OutputModel::PassFail {
                p_fail,
                hard_fraction,
                hard_p_fail,
            } => {
                prob("p_fail", *p_fail)?;
                prob("hard_fraction", *hard_fraction)?;
                prob("hard_p_fail", *hard_p_fail)
            }
            OutputModel::Fault { p } => prob("p", *p),
        }
    }
}

impl AgentLogic for ScriptedLogic {
    fn call(
        &self,
        ctx: &CallContext<'_>,
        state: Option<&mut StateLayer>,
    ) -> Result<Payload, String> {
        let spec = self.methods.get(&ctx.target.to_string());
        let mut digest = ctx.input_digest();
        if let (Some(spec), Some(layer)) = (spec, state) {
            if spec.history {
                let st = layer
                    .state_access(ctx.session, "history", StateKind::List, ctx.instance)
                    .map_err(|e| e.to_string())?;
                let mut buf = digest.0.to_vec();
                for h in st.list() {
                    buf.extend_from_slice(&h.digest().0);
                }
                digest = ContentDigest::of(&buf);
                st.push(Payload::text(format!("{}:{}", ctx.label, digest.short())))
                    .map_err(|e| e.to_string())?;
            }
        }
        let d = digest.short();
        let head = match spec.map(|s| &s.output).unwrap_or(&OutputModel::Echo) {
            OutputModel::Echo => "ok".to_string(),
            OutputModel::Count { min, max } => {
                let n = ctx.rng("out").random_range(*min..=*max);
                format!("count={n}")
            }
            OutputModel::Choice { options, weights } => {
                let total: f64 = weights.iter().sum();
                let mut x = ctx.rng("out").random::<f64>() * total;
                let mut pick = options.last().cloned().unwrap_or_default();
                for (o, w) in options.iter().zip(weights) {
                    if x < *w {
                        pick = o.clone();
                        break;
                    }
                    x -= w;
                }
                pick
            }
            OutputModel::PassFail {
                p_fail,
                hard_fraction,
                hard_p_fail,
            } => {
                let p = if ctx.session_rng("difficulty").random_bool(*hard_fraction) {
                    *hard_p_fail
                } else {
                    *p_fail
                };
                if ctx.rng("out").random_bool(p) {
                    "fail".into()
                } else {
                    "pass".into()
                }
            }
            OutputModel::Fault { p } => {
                if ctx.rng("out").random_bool(*p) {
                    return Err(format!("{} raised an error", ctx.target));
                }
                "ok".into()
            }
        };
        Ok(Payload::text(format!("{head}|{d}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(t: &'a Target, args: &'a [Payload], inst: &'a Location) -> CallContext<'a> {
        CallContext {
            seed: 1,
            session: SessionId(2),
            target: t,
            label: "r0/x",
            args,
            instance: inst,
        }
    }

    #[test]
    fn outputs_depend_on_inputs_not_location() {
        let logic = ScriptedLogic::new();
        let t = Target::new("a", "m");
        let args = [Payload::text("q")];
        let a = logic
            .call(&ctx(&t, &args, &Location::new("a", 0)), None)
            .unwrap();
        let b = logic
            .call(&ctx(&t, &args, &Location::new("a", 1)), None)
            .unwrap();
        assert_eq!(a, b);
        let other = [Payload::text("r")];
        assert_ne!(
            a,
            logic
                .call(&ctx(&t, &other, &Location::new("a", 0)), None)
                .unwrap()
        );
    }

    #[test]
    fn history_changes_successive_outputs() {
        let logic = ScriptedLogic::new().with("a.m", OutputModel::Echo, true);
        let t = Target::new("a", "m");
        let inst = Location::new("a", 0);
        let mut layer = StateLayer::new(inst.clone(), 4);
        let first = logic.call(&ctx(&t, &[], &inst), Some(&mut layer)).unwrap();
        let second = logic.call(&ctx(&t, &[], &inst), Some(&mut layer)).unwrap();
        assert_ne!(first, second);
    }

    #[test]
    fn count_and_choice_heads() {
        let logic = ScriptedLogic::new()
            .with("p.plan", OutputModel::Count { min: 3, max: 3 }, false)
            .with(
                "c.classify",
                OutputModel::Choice {
                    options: vec!["code".into(), "chat".into()],
                    weights: vec![1.0, 0.0],
                },
                false,
            );
        let inst = Location::new("p", 0);
        let t = Target::new("p", "plan");
        assert!(logic
            .call(&ctx(&t, &[], &inst), None)
            .unwrap()
            .as_str()
            .unwrap()
            .starts_with("count=3|"));
        let t = Target::new("c", "classify");
        assert!(logic
            .call(&ctx(&t, &[], &inst), None)
            .unwrap()
            .as_str()
            .unwrap()
            .starts_with("code|"));
    }
}
