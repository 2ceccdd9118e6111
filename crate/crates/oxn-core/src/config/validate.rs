//! Cross-field validation: checks that need the compose file or arithmetic
//! across sections. Violations are data, not failures — the report lists
//! everything wrong at once.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::compose::parse_compose;
use crate::config::ExperimentSpec;
use crate::loadgen;
use crate::treatments::schedule::plan_schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    ComposeMissing,
    ComposeInvalid,
    UnknownService,
    ExcludedService,
    ScheduleOverflow,
    LoadProfileInfeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:?}] {}: {}", self.code, self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "OK");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Validate a parsed spec against its compose file (resolved relative to
/// `base_dir`, normally the experiment file's directory). Deterministic:
/// same spec and same compose contents give the same report.
pub fn validate(spec: &ExperimentSpec, base_dir: &Path) -> ValidationReport {
    let mut violations = Vec::new();

    let compose_path = base_dir.join(&spec.sue.compose_path);
    let compose = match std::fs::read_to_string(&compose_path) {
        Err(e) => {
            violations.push(Violation {
                code: ViolationCode::ComposeMissing,
                path: "experiment.sue.compose".into(),
                message: format!("cannot read {}: {e}", compose_path.display()),
            });
            None
        }
        Ok(text) => match parse_compose(&text) {
            Err(e) => {
                violations.push(Violation {
                    code: ViolationCode::ComposeInvalid,
                    path: "experiment.sue.compose".into(),
                    message: e.to_string(),
                });
                None
            }
            Ok(file) => Some(file),
        },
    };

    if let Some(compose) = &compose {
        for (i, name) in spec.sue.exclude.iter().enumerate() {
            if !compose.services.contains_key(name) {
                violations.push(Violation {
                    code: ViolationCode::UnknownService,
                    path: format!("experiment.sue.exclude[{i}]"),
                    message: format!("service {name:?} is not in the compose file"),
                });
            }
        }
        if let Some(include) = &spec.sue.include {
            for (i, name) in include.iter().enumerate() {
                if !compose.services.contains_key(name) {
                    violations.push(Violation {
                        code: ViolationCode::UnknownService,
                        path: format!("experiment.sue.include[{i}]"),
                        message: format!("service {name:?} is not in the compose file"),
                    });
                }
            }
        }

        let surviving = |name: &str| {
            compose.services.contains_key(name)
                && !spec.sue.exclude.iter().any(|e| e == name)
                && spec
                    .sue
                    .include
                    .as_ref()
                    .is_none_or(|inc| inc.iter().any(|i| i == name))
        };

        // a surviving service must not depend on a filtered-out one
        for (name, def) in &compose.services {
            if !surviving(name) {
                continue;
            }
            for dep in &def.depends_on {
                if !surviving(dep) {
                    violations.push(Violation {
                        code: ViolationCode::UnknownService,
                        path: "experiment.sue".into(),
                        message: format!(
                            "service {name:?} depends on {dep:?} which is excluded or not included"
                        ),
                    });
                }
            }
        }

        for (i, treatment) in spec.treatments.iter().enumerate() {
            let target = treatment.target_service();
            let path = format!("experiment.treatments[{i}]");
            if spec.sue.exclude.iter().any(|e| e == target) {
                violations.push(Violation {
                    code: ViolationCode::ExcludedService,
                    path,
                    message: format!(
                        "treatment {:?} targets excluded service {target:?}",
                        treatment.name
                    ),
                });
            } else if !surviving(target) {
                violations.push(Violation {
                    code: ViolationCode::UnknownService,
                    path,
                    message: format!(
                        "treatment {:?} targets unknown service {target:?}",
                        treatment.name
                    ),
                });
            }
        }
    }

    if let Err(e) = plan_schedule(spec) {
        violations.push(Violation {
            code: ViolationCode::ScheduleOverflow,
            path: "experiment.treatments".into(),
            message: format!("fault window exceeds run time: {e}"),
        });
    }

    if let Err(e) = loadgen::compile_load_profile(&spec.loadgen) {
        violations.push(Violation {
            code: ViolationCode::LoadProfileInfeasible,
            path: "experiment.loadgen.stages".into(),
            message: e.to_string(),
        });
    }

    ValidationReport { violations }
}
