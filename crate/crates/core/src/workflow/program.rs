//! Declarative workflow programs.
//!
//! A program is a list of steps. `invoke` creates a future without
//! blocking; `fanout` repeats a body in parallel; `gate` branches on the
//! head of a future's value; `retry` re-issues failing items of a body;
//! `emit` names the request's result. Value heads are the text before the
//! first `|` of a payload.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Payload;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgTemplate {
    /// The request input.
    Input,
    /// The index of the enclosing fanout or retry item.
    Item,
    Const(String),
    /// A future bound by an earlier step.
    Ref(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountExpr {
    Fixed(u32),
    /// Parsed from a `count=<n>` head; consuming it blocks the driver.
    From(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Invoke {
        bind: String,
        agent: String,
        method: String,
        #[serde(default)]
        args: Vec<ArgTemplate>,
    },
    Fanout {
        count: CountExpr,
        body: Vec<Step>,
    },
    Gate {
        on: String,
        equals: String,
        #[serde(default)]
        then: Vec<Step>,
        #[serde(default)]
        otherwise: Vec<Step>,
    },
    Retry {
        items: CountExpr,
        max_rounds: u32,
        body: Vec<Step>,
        /// Binding in `body` whose head decides pass or fail.
        check: String,
        pass: String,
    },
    Emit {
        result: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowProgram {
    pub name: String,
    pub steps: Vec<Step>,
}

/// Head of a payload: the text before the first `|`.
pub fn head(p: &Payload) -> &str {
    let s = p.as_str().unwrap_or("");
    s.split('|').next().unwrap_or("")
}

/// Names bound anywhere in `steps`, in order of first appearance.
pub fn binds(steps: &[Step]) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    fn walk(steps: &[Step], out: &mut Vec<String>, seen: &mut BTreeSet<String>) {
        for s in steps {
            match s {
                Step::Invoke { bind, .. } => {
                    if seen.insert(bind.clone()) {
                        out.push(bind.clone());
                    }
                }
                Step::Fanout { body, .. } | Step::Retry { body, .. } => walk(body, out, seen),
                Step::Gate {
                    then, otherwise, ..
                } => {
                    walk(then, out, seen);
                    walk(otherwise, out, seen);
                }
                Step::Emit { .. } => {}
            }
        }
    }
    walk(steps, &mut out, &mut seen);
    out
}

impl WorkflowProgram {
    pub fn validate(&self) -> Result<()> {
        let path = format!("workflow.{}", self.name);
        if !matches!(self.steps.last(), Some(Step::Emit { .. })) {
            return Err(Error::config(path, "the last step must be `emit`"));
        }
        let mut scope = BTreeSet::new();
        check_block(&self.steps, &mut scope, &format!("{path}.steps"), false)
    }
}

fn check_ref(name: &str, scope: &BTreeSet<String>, path: &str) -> Result<()> {
    if scope.contains(name) {
        Ok(())
    } else {
        Err(Error::config(
            path,
            format!("`{name}` is not bound by an earlier step"),
        ))
    }
}

fn check_count(c: &CountExpr, scope: &BTreeSet<String>, path: &str) -> Result<()> {
    match c {
        CountExpr::Fixed(_) => Ok(()),
        CountExpr::From(n) => check_ref(n, scope, path),
    }
}

fn check_block(
    steps: &[Step],
    scope: &mut BTreeSet<String>,
    path: &str,
    nested: bool,
) -> Result<()> {
    for (i, s) in steps.iter().enumerate() {
        let p = format!("{path}[{i}]");
        match s {
            Step::Invoke {
                bind,
                args,
                agent,
                method,
            } => {
                if agent.is_empty() || method.is_empty() {
                    return Err(Error::config(p, "agent and method must be non-empty"));
                }
                for a in args {
                    if let ArgTemplate::Ref(n) = a {
                        check_ref(n, scope, &p)?;
                    }
                }
                scope.insert(bind.clone());
            }
            Step::Fanout { count, body } => {
                check_count(count, scope, &p)?;
                let mut inner = scope.clone();
                check_block(body, &mut inner, &format!("{p}.body"), true)?;
                scope.extend(binds(body));
            }
            Step::Gate {
                on,
                then,
                otherwise,
                ..
            } => {
                check_ref(on, scope, &p)?;
                let mut a = scope.clone();
                check_block(then, &mut a, &format!("{p}.then"), nested)?;
                let mut b = scope.clone();
                check_block(otherwise, &mut b, &format!("{p}.otherwise"), nested)?;
                let both: BTreeSet<String> = a.intersection(&b).cloned().collect();
                *scope = both;
            }
            Step::Retry {
                items,
                max_rounds,
                body,
                check,
                ..
            } => {
                check_count(items, scope, &p)?;
                if *max_rounds == 0 {
                    return Err(Error::config(format!("{p}.max_rounds"), "must be positive"));
                }
                let mut inner = scope.clone();
                check_block(body, &mut inner, &format!("{p}.body"), true)?;
                if !binds(body).contains(check) {
                    return Err(Error::config(
                        format!("{p}.check"),
                        format!("`{check}` is not bound in the body"),
                    ));
                }
                scope.extend(binds(body));
            }
            Step::Emit { result } => {
                if nested {
                    return Err(Error::config(p, "`emit` cannot appear inside a body"));
                }
                check_ref(result, scope, &p)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn invoke(bind: &str, args: Vec<ArgTemplate>) -> Step {
        Step::Invoke {
            bind: bind.into(),
            agent: "a".into(),
            method: "m".into(),
            args,
        }
    }

    #[test]
    fn forward_reference_is_rejected() {
        let p = WorkflowProgram {
            name: "w".into(),
            steps: vec![
                invoke("x", vec![ArgTemplate::Ref("y".into())]),
                Step::Emit { result: "x".into() },
            ],
        };
        let e = p.validate().unwrap_err().to_string();
        assert!(e.contains("workflow.w.steps[0]"), "{e}");
    }

    #[test]
    fn gate_exports_names_bound_in_both_branches() {
        let p = WorkflowProgram {
            name: "w".into(),
            steps: vec![
                invoke("c", vec![]),
                Step::Gate {
                    on: "c".into(),
                    equals: "x".into(),
                    then: vec![invoke("ans", vec![])],
                    otherwise: vec![invoke("ans", vec![]), invoke("extra", vec![])],
                },
                Step::Emit {
                    result: "ans".into(),
                },
            ],
        };
        p.validate().unwrap();
        let mut bad = p.clone();
        bad.steps[2] = Step::Emit {
            result: "extra".into(),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn head_splits_on_bar() {
        assert_eq!(head(&Payload::text("count=3|abc")), "count=3");
        assert_eq!(head(&Payload::text("plain")), "plain");
    }
}
