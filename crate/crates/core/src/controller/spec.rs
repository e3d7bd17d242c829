use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app::{App, AppConfig, AppResult};
use crate::protocol::{ClientId, Role};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read workflow file {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse workflow file: {0}")]
    Parse(String),
    #[error("invalid workflow: {0}")]
    Invalid(String),
}

/// One app invocation in a workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub app: String,
    #[serde(default)]
    pub config: AppConfig,
}

/// A workflow as exchanged out of band between all clients.
///
/// The client list order is shared by every client and fixes the order in
/// which contributions are aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    pub workflow_id: String,
    #[serde(default)]
    pub credentials: String,
    /// Relay address; may be overridden on the command line.
    #[serde(default)]
    pub relay: Option<String>,
    pub coordinator: ClientId,
    pub clients: Vec<ClientId>,
    /// Master seed, copied into every step config that lacks a `seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub poll_interval_ms: Option<u64>,
    #[serde(default)]
    pub step_timeout_secs: Option<u64>,
    pub steps: Vec<StepSpec>,
}

impl WorkflowSpec {
    /// Reads JSON, or YAML for `.yaml`/`.yml` files.
    pub fn from_file(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SpecError::Read { path: path.display().to_string(), source })?;
        let yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
        if yaml {
            serde_yaml::from_str(&text).map_err(|e| SpecError::Parse(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| SpecError::Parse(e.to_string()))
        }
    }

    pub fn role_of(&self, id: &ClientId) -> Option<Role> {
        if *id == self.coordinator {
            Some(Role::Coordinator)
        } else if self.clients.contains(id) {
            Some(Role::Participant)
        } else {
            None
        }
    }

    pub fn validate(&self, registry: &AppRegistry) -> Result<(), SpecError> {
        let invalid = |m: String| Err(SpecError::Invalid(m));
        if self.workflow_id.is_empty() {
            return invalid("workflow_id is empty".into());
        }
        if self.steps.is_empty() {
            return invalid("a workflow needs at least one step".into());
        }
        if !self.clients.contains(&self.coordinator) {
            return invalid(format!("coordinator {} is not in the client list", self.coordinator));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.clients {
            if c.is_relay() {
                return invalid(format!("client id {c} is reserved"));
            }
            if !seen.insert(c) {
                return invalid(format!("client {c} listed twice"));
            }
        }
        for (i, step) in self.steps.iter().enumerate() {
            if !registry.contains(&step.app) {
                return invalid(format!("step {i}: unknown app {:?} (known: {})", step.app, registry.names().join(", ")));
            }
        }
        Ok(())
    }
}

type Factory = dyn Fn(&AppConfig) -> AppResult<Box<dyn App>> + Send + Sync;

/// Maps app names to constructors. A factory sees the step config, so it
/// can pick a variant (for example a secure one) before setup.
#[derive(Clone, Default)]
pub struct AppRegistry {
    factories: BTreeMap<String, Arc<Factory>>,
}

impl std::fmt::Debug for AppRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl AppRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding the built-in `http` app, which forwards the four
    /// calls to an app server named by the `url` config key.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register("http", |config| {
            let url = config
                .opt_str("url")?
                .ok_or_else(|| crate::app::AppError::Setup("http app needs a url".into()))?;
            Ok(Box::new(crate::app::http::HttpApp::new(url)))
        });
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&AppConfig) -> AppResult<Box<dyn App>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn create(&self, name: &str, config: &AppConfig) -> AppResult<Box<dyn App>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| crate::app::AppError::Setup(format!("unknown app {name:?}")))?;
        factory(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const YAML: &str = "
workflow_id: wf
credentials: pw
coordinator: a
clients: [a, b]
seed: 7
steps:
  - app: http
    config: { url: 'http://127.0.0.1:1' }
";

    #[test]
    fn yaml_and_json_parse_alike() {
        let dir = tempfile::tempdir().unwrap();
        let y = dir.path().join("w.yaml");
        std::fs::write(&y, YAML).unwrap();
        let from_yaml = WorkflowSpec::from_file(&y).unwrap();
        let j = dir.path().join("w.json");
        std::fs::write(&j, serde_json::to_string(&from_yaml).unwrap()).unwrap();
        assert_eq!(WorkflowSpec::from_file(&j).unwrap(), from_yaml);
        assert_eq!(from_yaml.role_of(&"b".into()), Some(Role::Participant));
        from_yaml.validate(&AppRegistry::with_builtins()).unwrap();
    }

    #[test]
    fn validation_errors() {
        let mut spec: WorkflowSpec = serde_yaml::from_str(YAML).unwrap();
        let reg = AppRegistry::with_builtins();
        spec.steps[0].app = "nope".into();
        assert!(spec.validate(&reg).is_err());
        spec.steps.clear();
        assert!(spec.validate(&reg).is_err());
        let mut spec: WorkflowSpec = serde_yaml::from_str(YAML).unwrap();
        spec.coordinator = "z".into();
        assert!(spec.validate(&reg).is_err());
    }
}
