//! Budget-constrained maximization of a black-box validation metric over
//! box-bounded hyperparameter spaces.
//!
//! The default strategy only spends an objective call on a candidate that
//! could still beat the incumbent under a Lipschitz-style upper bound whose
//! slope estimate inflates after repeated rejections. A plain random-search
//! strategy is available behind the same interface. Both are sequential and
//! fully reproducible from the seed.

use std::collections::BTreeMap;
use std::io::{BufRead, Write as IoWrite};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named hyperparameter assignment.
pub type Config = BTreeMap<String, f64>;

/// Whether a dimension is searched in raw units or in log space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

/// One box-bounded search dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

/// The full search box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParamSpace {
    pub dims: Vec<ParamDim>,
}

impl HyperParamSpace {
    pub fn new(dims: Vec<ParamDim>) -> Result<Self> {
        let space = HyperParamSpace { dims };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidInput("search space has no dimensions".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.dims {
            if !d.lower.is_finite() || !d.upper.is_finite() || d.lower >= d.upper {
                return Err(Error::InvalidInput(format!(
                    "dimension '{}' needs lower < upper, got [{}, {}]",
                    d.name, d.lower, d.upper
                )));
            }
            if d.scale == Scale::Log && d.lower <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "log dimension '{}' needs lower > 0, got {}",
                    d.name, d.lower
                )));
            }
            if !seen.insert(d.name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate dimension name '{}'", d.name)));
            }
        }
        Ok(())
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Maps a unit-cube point to raw parameter values. Log dimensions
    /// interpolate in log space, so uniform unit samples are log-uniform.
    pub fn to_config(&self, unit: &[f64]) -> Config {
        assert_eq!(unit.len(), self.dims.len());
        self.dims
            .iter()
            .zip(unit)
            .map(|(d, &u)| {
                let u = u.clamp(0.0, 1.0);
                let v = match d.scale {
                    Scale::Linear => d.lower + u * (d.upper - d.lower),
                    Scale::Log => (d.lower.ln() + u * (d.upper.ln() - d.lower.ln())).exp(),
                };
                // Interpolation rounding must not escape the box.
                (d.name.clone(), v.clamp(d.lower, d.upper))
            })
            .collect()
    }

    /// Inverse of `to_config`; errors when a name is missing or a value is
    /// outside its bounds.
    pub fn to_unit(&self, config: &Config) -> Result<Vec<f64>> {
        self.dims
            .iter()
            .map(|d| {
                let v = *config.get(&d.name).ok_or_else(|| {
                    Error::InvalidInput(format!("config missing dimension '{}'", d.name))
                })?;
                if v < d.lower || v > d.upper {
                    return Err(Error::InvalidInput(format!(
                        "'{}' = {v} outside [{}, {}]",
                        d.name, d.lower, d.upper
                    )));
                }
                Ok(match d.scale {
                    Scale::Linear => (v - d.lower) / (d.upper - d.lower),
                    Scale::Log => (v.ln() - d.lower.ln()) / (d.upper.ln() - d.lower.ln()),
                })
            })
            .collect()
    }

    /// True when every dimension is present and inside its bounds.
    pub fn contains(&self, config: &Config) -> bool {
        self.to_unit(config).is_ok()
    }

    fn sample_unit(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dims.len()).map(|_| rng.gen::<f64>()).collect()
    }

    /// Reads a space from a TOML file with a `[[dims]]` array.
    pub fn read_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let space: HyperParamSpace = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        space.validate()?;
        Ok(space)
    }

    pub fn write_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize space: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn dim(name: &str, lower: f64, upper: f64, scale: Scale) -> ParamDim {
    ParamDim { name: name.to_string(), lower, upper, scale }
}

/// Published search intervals for the supported detector families.
/// Learning rates and weight decays are searched in log space; ratios,
/// gains, and thresholds are linear.
pub fn builtin_space(backend_name: &str) -> Result<HyperParamSpace> {
    let dims = match backend_name {
        "yolo" => vec![
            dim("lr0", 1e-4, 1e-2, Scale::Log),
            dim("lrf", 0.01, 0.1, Scale::Linear),
            dim("momentum", 0.90, 0.98, Scale::Linear),
            dim("weight_decay", 1e-5, 0.005, Scale::Log),
            dim("box", 7.0, 10.0, Scale::Linear),
            dim("translate", 0.0, 0.3, Scale::Linear),
            dim("cls", 0.2, 1.5, Scale::Linear),
            dim("dfl", 0.8, 2.5, Scale::Linear),
            dim("dropout", 0.0, 0.4, Scale::Linear),
            dim("erasing", 0.1, 0.5, Scale::Linear),
        ],
        "frcnn" => vec![
            dim("lr", 1e-5, 5e-3, Scale::Log),
            dim("momentum", 0.85, 0.98, Scale::Linear),
            dim("weight_decay", 1e-6, 1e-3, Scale::Log),
            dim("rpn_nms", 0.4, 0.8, Scale::Linear),
            dim("box_score", 0.2, 0.5, Scale::Linear),
            dim("box_nms", 0.4, 0.7, Scale::Linear),
        ],
        "satlas" => vec![
            dim("lr", 1e-5, 5e-4, Scale::Log),
            dim("weight_decay", 1e-6, 1e-3, Scale::Log),
            dim("conf", 0.01, 0.4, Scale::Linear),
            dim("nms", 0.4, 0.8, Scale::Linear),
        ],
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown backend '{other}' (expected yolo, frcnn, or satlas)"
            )))
        }
    };
    HyperParamSpace::new(dims)
}

/// Outcome of one objective call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Ok,
    Failed,
}

/// One objective call. Failed calls keep `value = -inf` in memory and are
/// written with a null value on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub t: usize,
    pub config: Config,
    pub value: f64,
    pub status: CallStatus,
    pub wall_time_s: f64,
}

/// Complete optimization trace: at most `budget` calls, in issue order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationLedger {
    pub budget: usize,
    pub calls: Vec<CallRecord>,
}

impl EvaluationLedger {
    pub fn new(budget: usize) -> Self {
        EvaluationLedger { budget, calls: Vec::new() }
    }

    fn push(&mut self, record: CallRecord) {
        assert!(self.calls.len() < self.budget, "ledger already at budget");
        self.calls.push(record);
    }

    /// Best successful call so far, if any call succeeded.
    pub fn incumbent(&self) -> Option<(&Config, f64)> {
        self.calls
            .iter()
            .filter(|c| c.status == CallStatus::Ok)
            .max_by(|a, b| a.value.total_cmp(&b.value))
            .map(|c| (&c.config, c.value))
    }

    /// Running best value per call index (`-inf` until the first success).
    pub fn incumbent_trace(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.calls
            .iter()
            .map(|c| {
                if c.status == CallStatus::Ok {
                    best = best.max(c.value);
                }
                best
            })
            .collect()
    }

    /// Checks the properties any well-formed ledger must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        if self.calls.len() > self.budget {
            return Err(Error::InvalidInput(format!(
                "ledger has {} calls over budget {}",
                self.calls.len(),
                self.budget
            )));
        }
        let trace = self.incumbent_trace();
        if trace.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput("incumbent trace decreased".into()));
        }
        if let Some((_, best)) = self.incumbent() {
            let max = self
                .calls
                .iter()
                .filter(|c| c.status == CallStatus::Ok)
                .map(|c| c.value)
                .fold(f64::NEG_INFINITY, f64::max);
            if best != max {
                return Err(Error::InvalidInput("incumbent is not the max value".into()));
            }
        }
        Ok(())
    }

    /// Digest over the decision content (configs, values, statuses). Wall
    /// times are excluded: they vary across runs even at a fixed seed.
    pub fn decision_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for c in &self.calls {
            hasher.update(c.t.to_le_bytes());
            for (k, v) in &c.config {
                hasher.update(k.as_bytes());
                hasher.update(v.to_bits().to_le_bytes());
            }
            hasher.update(c.value.to_bits().to_le_bytes());
            hasher.update([matches!(c.status, CallStatus::Failed) as u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for c in &self.calls {
            let line = LedgerLine {
                t: c.t,
                config: c.config.clone(),
                value: (c.status == CallStatus::Ok).then_some(c.value),
                status: c.status,
                wall_time_s: c.wall_time_s,
            };
            let json = serde_json::to_string(&line)
                .map_err(|e| Error::Decode(format!("serialize ledger line: {e}")))?;
            writeln!(out, "{json}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a ledger written by `write_jsonl`. `budget` restores the cap
    /// the run was issued under.
    pub fn read_jsonl(path: &Path, budget: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut calls = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LedgerLine = serde_json::from_str(&line)
                .map_err(|e| Error::Decode(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            calls.push(CallRecord {
                t: parsed.t,
                config: parsed.config,
                value: parsed.value.unwrap_or(f64::NEG_INFINITY),
                status: parsed.status,
                wall_time_s: parsed.wall_time_s,
            });
        }
        let ledger = EvaluationLedger { budget, calls };
        ledger.check_invariants()?;
        Ok(ledger)
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerLine {
    t: usize,
    config: Config,
    value: Option<f64>,
    status: CallStatus,
    wall_time_s: f64,
}

/// A proposal rule. Implementations must be deterministic given the rng
/// and history, and must only propose points inside the unit cube.
pub trait SearchStrategy {
    fn name(&self) -> &'static str;

    /// Runs the full sequential loop, spending at most `budget` objective
    /// calls. `history` passed to proposals contains successful calls only.
    fn run(
        &self,
        objective: &mut dyn FnMut(&Config) -> Result<f64>,
        space: &HyperParamSpace,
        budget: usize,
        seed: u64,
    ) -> Result<EvaluationLedger>;
}

/// Shared evaluation step: clocks the call, maps errors and non-finite
/// values to failed records, updates the unit-space history on success.
fn evaluate_candidate(
    objective: &mut dyn FnMut(&Config) -> Result<f64>,
    space: &HyperParamSpace,
    unit: &[f64],
    t: usize,
    history: &mut Vec<(Vec<f64>, f64)>,
    ledger: &mut EvaluationLedger,
) {
    let config = space.to_config(unit);
    let started = Instant::now();
    let outcome = objective(&config);
    let wall_time_s = started.elapsed().as_secs_f64();
    match outcome {
        Ok(value) if value.is_finite() => {
            history.push((unit.to_vec(), value));
            ledger.push(CallRecord { t, config, value, status: CallStatus::Ok, wall_time_s });
        }
        _ => {
            ledger.push(CallRecord {
                t,
                config,
                value: f64::NEG_INFINITY,
                status: CallStatus::Failed,
                wall_time_s,
            });
        }
    }
}

/// Call-efficient default: a candidate is evaluated only while its
/// Lipschitz upper bound `min_i(f_i + eps * |x - x_i|)` can still reach the
/// incumbent. The slope estimate `eps` starts small and multiplies by
/// `growth` after every `patience` consecutive rejections, so acceptance is
/// always reachable. Failed calls never enter the bound (their value would
/// veto everything).
#[derive(Debug, Clone, PartialEq)]
pub struct EcpOptimizer {
    pub epsilon0: f64,
    pub growth: f64,
    pub patience: usize,
}

impl Default for EcpOptimizer {
    fn default() -> Self {
        EcpOptimizer { epsilon0: 1e-2, growth: 2.0, patience: 50 }
    }
}

impl EcpOptimizer {
    /// Hard cap on candidate draws per call; reaching it accepts the next
    /// draw unconditionally so the run can never stall.
    const MAX_DRAWS_PER_CALL: usize = 100_000;
}

impl SearchStrategy for EcpOptimizer {
    fn name(&self) -> &'static str {
        "ecp"
    }

    fn run(
        &self,
        objective: &mut dyn FnMut(&Config) -> Result<f64>,
        space: &HyperParamSpace,
        budget: usize,
        seed: u64,
    ) -> Result<EvaluationLedger> {
        check_run_inputs(space, budget)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ledger = EvaluationLedger::new(budget);
        let mut history: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut epsilon = self.epsilon0;
        for t in 0..budget {
            let unit = self.accept_next(space, &history, &mut epsilon, &mut rng);
            evaluate_candidate(objective, space, &unit, t, &mut history, &mut ledger);
        }
        Ok(ledger)
    }
}

impl EcpOptimizer {
    fn accept_next(
        &self,
        space: &HyperParamSpace,
        history: &[(Vec<f64>, f64)],
        epsilon: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let best = history.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let mut rejections = 0usize;
        for draw in 0..Self::MAX_DRAWS_PER_CALL {
            let candidate = space.sample_unit(rng);
            if history.is_empty() || draw + 1 == Self::MAX_DRAWS_PER_CALL {
                return candidate;
            }
            let upper_bound = history
                .iter()
                .map(|(x, v)| v + *epsilon * euclidean(x, &candidate))
                .fold(f64::INFINITY, f64::min);
            if upper_bound >= best {
                return candidate;
            }
            rejections += 1;
            if rejections % self.patience == 0 {
                *epsilon *= self.growth;
            }
        }
        unreachable!("loop always returns by the final draw");
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Baseline that accepts every uniform draw. Kept for comparison runs and
/// as a fallback when the acceptance rule is not wanted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RandomSearch;

impl SearchStrategy for RandomSearch {
    fn name(&self) -> &'static str {
        "random"
    }

    fn run(
        &self,
        objective: &mut dyn FnMut(&Config) -> Result<f64>,
        space: &HyperParamSpace,
        budget: usize,
        seed: u64,
    ) -> Result<EvaluationLedger> {
        check_run_inputs(space, budget)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ledger = EvaluationLedger::new(budget);
        let mut history = Vec::new();
        for t in 0..budget {
            let unit = space.sample_unit(&mut rng);
            evaluate_candidate(objective, space, &unit, t, &mut history, &mut ledger);
        }
        Ok(ledger)
    }
}

fn check_run_inputs(space: &HyperParamSpace, budget: usize) -> Result<()> {
    space.validate()?;
    if budget == 0 {
        return Err(Error::InvalidInput("optimization budget must be at least 1".into()));
    }
    Ok(())
}

/// Strategy lookup by CLI name.
pub fn strategy_by_name(name: &str) -> Result<Box<dyn SearchStrategy>> {
    match name {
        "ecp" => Ok(Box::new(EcpOptimizer::default())),
        "random" => Ok(Box::new(RandomSearch)),
        other => Err(Error::InvalidInput(format!(
            "unknown strategy '{other}' (expected ecp or random)"
        ))),
    }
}

/// Runs the default strategy.
pub fn optimize(
    objective: &mut dyn FnMut(&Config) -> Result<f64>,
    space: &HyperParamSpace,
    budget: usize,
    seed: u64,
) -> Result<EvaluationLedger> {
    EcpOptimizer::default().run(objective, space, budget, seed)
}
