//! Cost oracles: the things that attach a training-step cost to a
//! configuration. The builtin synthetic cluster model, fitted simulator
//! ensembles, noise wrappers, and external subprocess oracles all sit
//! behind one trait so the search loop does not care where numbers come
//! from.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::space::{ConfigSpace, Configuration};

/// Result of one successful oracle exchange. `Infeasible` is a sentinel for
/// configurations that pass structural validation but cannot run (out of
/// memory, unsupported combination); it is a valid answer, not an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostOutcome {
    Cost(f64),
    Infeasible,
}

impl CostOutcome {
    pub fn finite(self) -> Option<f64> {
        match self {
            CostOutcome::Cost(c) => Some(c),
            CostOutcome::Infeasible => None,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum OracleError {
    #[error("no usable simulator is available")]
    Unavailable,
    #[error("failed to launch oracle command: {0}")]
    Spawn(String),
    #[error("oracle timed out after {0:.1}s")]
    Timeout(f64),
    #[error("oracle failed: {0}")]
    Failed(String),
    #[error("oracle produced malformed output: {0:?}")]
    Malformed(String),
}

pub trait CostOracle: Send + Sync {
    fn evaluate(&self, space: &ConfigSpace, c: &Configuration)
        -> Result<CostOutcome, OracleError>;

    /// How many evaluations may usefully run concurrently. Pure in-process
    /// oracles gain nothing from threads.
    fn max_parallel(&self) -> usize {
        1
    }
}

/// Closure-backed oracle, mostly for tests and custom harnesses.
pub struct FnOracle<F>(pub F);

impl<F> CostOracle for FnOracle<F>
where
    F: Fn(&ConfigSpace, &Configuration) -> Result<CostOutcome, OracleError> + Send + Sync,
{
    fn evaluate(
        &self,
        space: &ConfigSpace,
        c: &Configuration,
    ) -> Result<CostOutcome, OracleError> {
        (self.0)(space, c)
    }
}

/// Multiplicative-noise wrapper: each finite cost becomes
/// `cost * (1 + u)` with `u` drawn uniformly from `[-noise_pct, +noise_pct]`
/// by a seeded generator, so a run's noise sequence is reproducible.
/// Infeasible outcomes and errors pass through untouched.
pub struct NoisyOracle<O> {
    inner: O,
    noise_pct: f64,
    rng: Mutex<StdRng>,
}

impl<O> NoisyOracle<O> {
    pub fn new(inner: O, noise_pct: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&noise_pct), "noise_pct must be in [0, 1)");
        NoisyOracle {
            inner,
            noise_pct,
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
        }
    }
}

impl<O: CostOracle> CostOracle for NoisyOracle<O> {
    fn evaluate(
        &self,
        space: &ConfigSpace,
        c: &Configuration,
    ) -> Result<CostOutcome, OracleError> {
        let outcome = self.inner.evaluate(space, c)?;
        Ok(match outcome {
            CostOutcome::Cost(cost) => {
                let u = if self.noise_pct == 0.0 {
                    0.0
                } else {
                    self.rng
                        .lock()
                        .expect("noise rng poisoned")
                        .gen_range(-self.noise_pct..=self.noise_pct)
                };
                CostOutcome::Cost(cost * (1.0 + u))
            }
            CostOutcome::Infeasible => CostOutcome::Infeasible,
        })
    }

    fn max_parallel(&self) -> usize {
        // Parallel draws would make the noise sequence order-dependent.
        1
    }
}

/// External oracle speaking a one-shot subprocess protocol: the candidate
/// configuration is written to stdin as a single flat JSON object, and the
/// process must answer with exactly one line on stdout containing either a
/// finite decimal cost or the token `INFEASIBLE`. Timeouts, nonzero exits,
/// and unparseable output are reported as oracle failures.
pub struct CommandOracle {
    path: PathBuf,
    timeout: Duration,
    /// When set, the child environment is cleared and only these variables
    /// (plus PATH) are passed through.
    env_allow: Option<Vec<String>>,
    max_parallel: usize,
}

impl CommandOracle {
    pub fn new(path: PathBuf, timeout: Duration, max_parallel: usize) -> Self {
        CommandOracle {
            path,
            timeout,
            env_allow: None,
            max_parallel: max_parallel.max(1),
        }
    }

    pub fn with_env_allowlist(mut self, vars: Vec<String>) -> Self {
        self.env_allow = Some(vars);
        self
    }

    pub fn path(&self) -> &PathBuf {
        &self.path
    }
}

impl CostOracle for CommandOracle {
    fn evaluate(
        &self,
        space: &ConfigSpace,
        c: &Configuration,
    ) -> Result<CostOutcome, OracleError> {
        let mut cmd = Command::new(&self.path);
        cmd.stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        if let Some(allow) = &self.env_allow {
            cmd.env_clear();
            for var in allow.iter().chain(std::iter::once(&"PATH".to_string())) {
                if let Ok(v) = std::env::var(var) {
                    cmd.env(var, v);
                }
            }
        }
        let mut child = cmd.spawn().map_err(|e| OracleError::Spawn(e.to_string()))?;

        let payload = format!("{}\n", space.to_flat_json(c));
        {
            let mut stdin = child.stdin.take().expect("stdin piped");
            // The child may exit without reading; a broken pipe here is its
            // answer to report, not ours.
            let _ = stdin.write_all(payload.as_bytes());
        }

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(OracleError::Timeout(self.timeout.as_secs_f64()));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(OracleError::Failed(e.to_string())),
            }
        };

        let mut out = String::new();
        if let Some(mut stdout) = child.stdout.take() {
            let _ = stdout.read_to_string(&mut out);
        }
        if !status.success() {
            return Err(OracleError::Failed(format!("exit status {status}")));
        }
        parse_oracle_line(&out)
    }

    fn max_parallel(&self) -> usize {
        self.max_parallel
    }
}

fn parse_oracle_line(out: &str) -> Result<CostOutcome, OracleError> {
    let line = out
        .lines()
        .next()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .ok_or_else(|| OracleError::Malformed(out.to_string()))?;
    if line == "INFEASIBLE" {
        return Ok(CostOutcome::Infeasible);
    }
    match line.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(CostOutcome::Cost(v)),
        _ => Err(OracleError::Malformed(line.to_string())),
    }
}
