//! TOML backend configuration: which implementation serves each role.
//!
//! ```toml
//! [world]
//! seed = 0
//! n_examples = 200
//! n_frames = 64
//! layout = "contiguous"
//!
//! [agent]
//! flip_prob = 0.1
//!
//! [[verifiers]]
//! kind = "planted"
//! name = "verifier-a"
//!
//! [[verifiers]]
//! kind = "http"
//! name = "remote"
//! ```

use std::path::Path;
use std::sync::Arc;
#[cfg(feature = "http")]
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[cfg(feature = "http")]
use super::HttpQaOracle;
use super::{BackendSuite, PlantedAgent, PlantedConfig, PlantedQa, PlantedWorld, QaOracle};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSpec {
    pub flip_prob: f64,
    /// Examples on which the agent always answers wrongly.
    pub wrong_ids: Vec<u64>,
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self {
            flip_prob: PlantedAgent::DEFAULT_FLIP_PROB,
            wrong_ids: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum VerifierSpec {
    Planted {
        name: String,
        #[serde(default)]
        wrong_ids: Vec<u64>,
    },
    /// Endpoint and timeout default to the `FRAMEORACLE_QA_*` environment.
    Http {
        name: String,
        endpoint: Option<String>,
        timeout_ms: Option<u64>,
        max_concurrency: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub world: PlantedConfig,
    pub agent: AgentSpec,
    /// Serves evaluation-time question answering; planted when absent.
    pub qa: Option<VerifierSpec>,
    pub verifiers: Vec<VerifierSpec>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            world: PlantedConfig::default(),
            agent: AgentSpec::default(),
            qa: None,
            verifiers: (0..3)
                .map(|i| VerifierSpec::Planted {
                    name: format!("verifier-{i}"),
                    wrong_ids: Vec::new(),
                })
                .collect(),
        }
    }
}

impl BackendConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<BackendSuite> {
        let world = Arc::new(PlantedWorld::generate(self.world.clone())?);
        let mut suite = BackendSuite::planted(world.clone(), 0);
        suite.agent = Some(Arc::new(
            PlantedAgent::new(world.clone())
                .with_flip_prob(self.agent.flip_prob)
                .with_wrong_ids(self.agent.wrong_ids.iter().copied()),
        ));
        if let Some(spec) = &self.qa {
            suite.qa_oracle = Some(build_verifier(spec, &world)?);
        }
        suite.verifiers = self
            .verifiers
            .iter()
            .map(|spec| build_verifier(spec, &world))
            .collect::<Result<_>>()?;
        Ok(suite)
    }
}

fn build_verifier(spec: &VerifierSpec, world: &Arc<PlantedWorld>) -> Result<Arc<dyn QaOracle>> {
    match spec {
        VerifierSpec::Planted { name, wrong_ids } => Ok(Arc::new(
            PlantedQa::new(world.clone(), name.clone()).with_wrong_ids(wrong_ids.iter().copied()),
        )),
        #[cfg(feature = "http")]
        VerifierSpec::Http {
            name,
            endpoint,
            timeout_ms,
            max_concurrency,
        } => {
            let mut oracle = match endpoint {
                Some(url) => HttpQaOracle::new(
                    name.clone(),
                    url.clone(),
                    timeout_ms.map_or(HttpQaOracle::DEFAULT_TIMEOUT, Duration::from_millis),
                ),
                None => HttpQaOracle::from_env(name.clone())?,
            };
            if let Some(n) = max_concurrency {
                oracle = oracle.with_max_concurrency(*n);
            }
            Ok(Arc::new(oracle))
        }
        #[cfg(not(feature = "http"))]
        VerifierSpec::Http { .. } => Err(Error::config("built without the `http` feature")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::EvidenceLayout;

    #[test]
    fn parses_a_mixed_config() {
        let cfg = BackendConfig::from_toml(
            r#"
            [world]
            seed = 4
            n_examples = 10
            n_frames = 64
            layout = "contiguous"

            [world.evidence]
            kind = "uniform"
            min = 2
            max = 6

            [agent]
            wrong_ids = [3]

            [[verifiers]]
            kind = "planted"
            name = "a"

            [[verifiers]]
            kind = "http"
            name = "remote"
            endpoint = "http://127.0.0.1:9/qa"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.world.layout, EvidenceLayout::Contiguous);
        assert_eq!(cfg.verifiers.len(), 2);
        #[cfg(feature = "http")]
        {
            let suite = cfg.build().unwrap();
            assert_eq!(suite.verifiers[1].name(), "remote");
            assert_eq!(suite.world.unwrap().len(), 10);
        }
        #[cfg(not(feature = "http"))]
        assert!(cfg.build().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(BackendConfig::from_toml("[world]\nsede = 1\n").is_err());
    }

    #[test]
    fn default_config_has_three_verifiers() {
        let suite = BackendConfig {
            world: PlantedConfig {
                n_examples: 2,
                ..PlantedConfig::default()
            },
            ..BackendConfig::default()
        }
        .build()
        .unwrap();
        assert_eq!(suite.verifiers.len(), 3);
    }
}
