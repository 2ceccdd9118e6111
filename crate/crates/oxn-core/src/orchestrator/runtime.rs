//! The runtime capability interface treatments are written against.
//!
//! Both the container backend and the simulated SUE implement it; the
//! pre-start model patcher used for instrumentation treatments does too.
//! Every mutation is journaled by the implementation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Container,
    Simulated,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Container => "container",
            BackendKind::Simulated => "sim",
        }
    }
}

/// Lifecycle state of one service. Transitions follow
/// starting -> ready -> (paused <-> ready | killed) -> stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceState {
    Starting,
    Ready,
    Paused,
    Killed,
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutput {
    pub exit_code: i64,
    pub output: String,
}

impl ExecOutput {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("service {service:?} is {state:?}, cannot {operation}")]
    InvalidState {
        service: String,
        state: ServiceState,
        operation: &'static str,
    },
    #[error("{operation} is only valid before the system is started")]
    NotPrestart { operation: &'static str },
    #[error("runtime not started")]
    NotStarted,
    #[error("backend error: {0}")]
    Backend(String),
}

/// Operations treatments may invoke against a running (or, for the patch
/// calls, a not-yet-started) system under experiment.
pub trait RuntimeApi: Send + Sync {
    fn backend_kind(&self) -> BackendKind;
    fn services(&self) -> Vec<String>;
    fn state_of(&self, service: &str) -> Option<ServiceState>;

    /// Suspend all processes in a service.
    fn pause(&self, service: &str) -> Result<(), RuntimeError>;
    fn unpause(&self, service: &str) -> Result<(), RuntimeError>;
    /// Terminate a service; there is no recovery.
    fn kill(&self, service: &str) -> Result<(), RuntimeError>;
    /// Run a command inside a service.
    fn exec(&self, service: &str, command: &[String]) -> Result<ExecOutput, RuntimeError>;

    /// Pre-start only: rewrite one environment variable of a service.
    fn patch_env(&self, service: &str, key: &str, value: &str) -> Result<(), RuntimeError>;
    /// Pre-start only: replace a config file mounted into a service.
    fn patch_config_file(
        &self,
        service: &str,
        path: &str,
        contents: &str,
    ) -> Result<(), RuntimeError>;
}
