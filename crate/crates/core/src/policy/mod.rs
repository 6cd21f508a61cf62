//! Operator policies: programs over a [`GlobalSnapshot`] that return
//! control commands.

mod builtin;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::GlobalSnapshot;
use crate::model::ControlCommand;

pub use builtin::{HolMigration, LoadBalanceRouting, Lpt, ResourceReassign, Srtf};

pub trait Policy: Send {
    fn name(&self) -> &str;
    fn decide(&mut self, snapshot: &GlobalSnapshot) -> Vec<ControlCommand>;
}

/// Issues nothing: plain FCFS with static routing.
pub struct NullPolicy;

impl Policy for NullPolicy {
    fn name(&self) -> &str {
        "fcfs"
    }

    fn decide(&mut self, _: &GlobalSnapshot) -> Vec<ControlCommand> {
        Vec::new()
    }
}

/// Runs several policies in order and concatenates their commands.
pub struct Composite {
    name: String,
    parts: Vec<Box<dyn Policy>>,
}

impl Composite {
    pub fn new(parts: Vec<Box<dyn Policy>>) -> Self {
        let name = parts.iter().map(|p| p.name()).collect::<Vec<_>>().join("+");
        Composite { name, parts }
    }
}

impl Policy for Composite {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, snapshot: &GlobalSnapshot) -> Vec<ControlCommand> {
        self.parts
            .iter_mut()
            .flat_map(|p| p.decide(snapshot))
            .collect()
    }
}

pub type Params = BTreeMap<String, f64>;

/// Policy selection as it appears in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub names: Vec<String>,
    #[serde(default)]
    pub params: Params,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            names: vec!["fcfs".into()],
            params: Params::new(),
        }
    }
}

pub(crate) fn param(params: &Params, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

type Factory = Box<dyn Fn(&Params) -> Box<dyn Policy> + Send + Sync>;

/// Name-indexed policy constructors. Custom policies register here.
pub struct PolicyRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        let mut r = PolicyRegistry {
            factories: BTreeMap::new(),
        };
        r.register("fcfs", |_| Box::new(NullPolicy));
        r.register("load_balance_routing", |p| {
            Box::new(LoadBalanceRouting::from_params(p))
        });
        r.register("hol_migration", |p| Box::new(HolMigration::from_params(p)));
        r.register("resource_reassign", |p| {
            Box::new(ResourceReassign::from_params(p))
        });
        r.register("srtf", |_| Box::new(Srtf));
        r.register("lpt", |_| Box::new(Lpt));
        r
    }
}

impl PolicyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        f: impl Fn(&Params) -> Box<dyn Policy> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(f));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(|s| s.as_str())
    }

    pub fn build(&self, spec: &PolicySpec) -> Result<Box<dyn Policy>> {
        if spec.names.is_empty() {
            return Err(Error::config(
                "policy.names",
                "at least one policy is required",
            ));
        }
        let mut parts = Vec::new();
        for (i, n) in spec.names.iter().enumerate() {
            let f = self.factories.get(n).ok_or_else(|| {
                Error::config(
                    format!("policy.names[{i}]"),
                    format!("unknown policy `{n}`"),
                )
            })?;
            parts.push(f(&spec.params));
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Box::new(Composite::new(parts))
        })
    }
}
