use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::spec::{ContextFamily, Factor, Link, LinearIndex, NoiseKind, ProbabilityKernel, ScenarioSpec};
use super::SimError;
use crate::numeric::inv_logit;
use crate::panel::{Job, Panel, PanelSet};
use crate::par;

/// Derives the seed of replicate `index` from a base seed by stream splitting.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Context = 1,
    Decision = 2,
    Outcome = 3,
    Continuation = 4,
}

/// Exogenous noise: one independent ChaCha stream per (slot, job, component).
///
/// Both worlds of a pair hold the same key, so every variable consults the same
/// draws no matter how the trajectories diverge.
struct Exogenous {
    key: <ChaCha8Rng as SeedableRng>::Seed,
}

impl Exogenous {
    fn new(seed: u64) -> Self {
        Self {
            key: ChaCha8Rng::seed_from_u64(seed).get_seed(),
        }
    }

    fn stream(&self, slot: Slot, job: usize, component: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(((slot as u64) << 60) | ((job as u64) << 20) | component as u64);
        rng
    }

    fn uniform(&self, slot: Slot, job: usize, component: usize) -> f64 {
        self.stream(slot, job, component).random::<f64>()
    }

    fn normal(&self, slot: Slot, job: usize, component: usize) -> f64 {
        self.stream(slot, job, component).sample(StandardNormal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CFactor {
    X { col: usize, lag: usize },
    A { lag: usize },
    Y { lag: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct CIndex {
    intercept: f64,
    terms: Vec<(f64, Vec<CFactor>)>,
}

/// Which factors a kernel may read.
#[derive(Clone, Copy)]
struct Scope {
    current_x: bool,
    current_a: bool,
    current_y: bool,
}

impl CIndex {
    fn compile(index: &LinearIndex, columns: &[String], scope: Scope, what: &str) -> Result<Self, SimError> {
        let mut terms = Vec::with_capacity(index.terms.len());
        for term in &index.terms {
            if !term.coef.is_finite() {
                return Err(SimError::InvalidSpec(format!("{what}: non-finite coefficient")));
            }
            let mut factors = Vec::with_capacity(term.of.len());
            for f in &term.of {
                let illegal = || SimError::InvalidSpec(format!("{what}: factor `{f}` is not available here"));
                let cf = match f {
                    Factor::X { name, lag } => {
                        let col = columns
                            .iter()
                            .position(|c| c == name)
                            .ok_or_else(|| SimError::InvalidSpec(format!("{what}: unknown column `{name}`")))?;
                        if *lag == 0 && !scope.current_x {
                            return Err(illegal());
                        }
                        CFactor::X { col, lag: *lag }
                    }
                    Factor::A { lag } => {
                        if *lag == 0 && !scope.current_a {
                            return Err(illegal());
                        }
                        CFactor::A { lag: *lag }
                    }
                    Factor::Y { lag } => {
                        if *lag == 0 && !scope.current_y {
                            return Err(illegal());
                        }
                        CFactor::Y { lag: *lag }
                    }
                };
                factors.push(cf);
            }
            terms.push((term.coef, factors));
        }
        if !index.intercept.is_finite() {
            return Err(SimError::InvalidSpec(format!("{what}: non-finite intercept")));
        }
        Ok(Self {
            intercept: index.intercept,
            terms,
        })
    }

    /// `prev` holds the jobs before the current one; `cur` the current job so far.
    fn eval(&self, prev: &[Job], cur_x: &[f64], cur_a: f64, cur_y: f64) -> f64 {
        let value = |f: &CFactor| -> f64 {
            let past = |lag: usize| prev.len().checked_sub(lag).map(|i| &prev[i]);
            match *f {
                CFactor::X { col, lag: 0 } => cur_x[col],
                CFactor::A { lag: 0 } => cur_a,
                CFactor::Y { lag: 0 } => cur_y,
                CFactor::X { col, lag } => past(lag).map_or(0.0, |j| j.x[col]),
                CFactor::A { lag } => past(lag).map_or(0.0, |j| f64::from(j.a)),
                CFactor::Y { lag } => past(lag).map_or(0.0, |j| j.y),
            }
        };
        self.intercept
            + self
                .terms
                .iter()
                .map(|(c, fs)| c * fs.iter().map(value).product::<f64>())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CProbability {
    link: Link,
    index: CIndex,
}

impl CProbability {
    fn compile(k: &ProbabilityKernel, columns: &[String], scope: Scope, what: &str) -> Result<Self, SimError> {
        Ok(Self {
            link: k.link,
            index: CIndex::compile(&k.index, columns, scope, what)?,
        })
    }

    fn prob(&self, prev: &[Job], x: &[f64], a: f64, y: f64) -> f64 {
        let z = self.index.eval(prev, x, a, y);
        match self.link {
            Link::Logit => inv_logit(z),
            Link::Identity => z.clamp(0.0, 1.0),
        }
    }
}

/// A validated scenario ready for simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    spec: ScenarioSpec,
    contexts: Vec<(ContextFamily, CIndex, f64)>,
    decision: CProbability,
    outcome_mean: CIndex,
    outcome_scale: CIndex,
    continuation: CProbability,
}

/// Two complete trajectories sharing exogenous noise, differing only in the
/// decision passed forward from job `k_star`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldPair {
    pub k_star: usize,
    pub world_1: Panel,
    pub world_0: Panel,
    /// Decision job `k_star` would take if left alone.
    pub natural_a: u8,
    pub shared_seed: u64,
}

impl WorldPair {
    pub fn world(&self, arm: u8) -> &Panel {
        if arm == 1 {
            &self.world_1
        } else {
            &self.world_0
        }
    }

    /// The unforced trajectory, which coincides with the arm matching the natural decision.
    pub fn natural(&self) -> &Panel {
        self.world(self.natural_a)
    }
}

impl Scenario {
    /// Validates a scenario, requiring a positivity floor in (0, 0.5).
    pub fn new(spec: ScenarioSpec) -> Result<Self, SimError> {
        if !(spec.positivity_floor > 0.0 && spec.positivity_floor < 0.5) {
            return Err(SimError::InvalidSpec(format!(
                "positivity_floor must lie in (0, 0.5), got {}",
                spec.positivity_floor
            )));
        }
        Self::build(spec)
    }

    /// Like [`Scenario::new`] but allows a zero positivity floor, for studying
    /// what happens when some stratum is never (or always) assigned.
    pub fn without_positivity(spec: ScenarioSpec) -> Result<Self, SimError> {
        if !(spec.positivity_floor >= 0.0 && spec.positivity_floor < 0.5) {
            return Err(SimError::InvalidSpec("positivity_floor must lie in [0, 0.5)".into()));
        }
        Self::build(spec)
    }

    fn build(spec: ScenarioSpec) -> Result<Self, SimError> {
        if spec.k_max == 0 {
            return Err(SimError::InvalidSpec("k_max must be at least 1".into()));
        }
        if spec.k_max >= 1 << 30 {
            return Err(SimError::InvalidSpec("k_max is too large".into()));
        }
        let columns = spec.column_names();
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].contains(c) {
                return Err(SimError::InvalidSpec(format!("duplicate context column `{c}`")));
            }
        }
        let past_only = Scope {
            current_x: false,
            current_a: false,
            current_y: false,
        };
        let contexts = spec
            .context
            .iter()
            .map(|c| {
                if !(c.sd.is_finite() && c.sd >= 0.0) {
                    return Err(SimError::InvalidSpec(format!("context `{}`: sd must be >= 0", c.name)));
                }
                Ok((
                    c.family,
                    CIndex::compile(&c.index, &columns, past_only, &format!("context `{}`", c.name))?,
                    c.sd,
                ))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let decision = CProbability::compile(
            &spec.decision,
            &columns,
            Scope {
                current_x: true,
                ..past_only
            },
            "decision",
        )?;
        let outcome_scope = Scope {
            current_x: true,
            current_a: true,
            current_y: false,
        };
        let outcome_mean = CIndex::compile(&spec.outcome.mean, &columns, outcome_scope, "outcome")?;
        let outcome_scale = CIndex::compile(&spec.outcome.scale, &columns, outcome_scope, "outcome scale")?;
        let continuation = CProbability::compile(
            &spec.continuation,
            &columns,
            Scope {
                current_x: true,
                current_a: true,
                current_y: true,
            },
            "continuation",
        )?;
        Ok(Self {
            spec,
            contexts,
            decision,
            outcome_mean,
            outcome_scale,
            continuation,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn column_names(&self) -> Vec<String> {
        self.spec.column_names()
    }

    pub fn k_max(&self) -> usize {
        self.spec.k_max
    }

    /// `P(A_j = 1 | X_j, H_{j−1})` after clamping to the positivity floor.
    pub fn decision_probability(&self, prev: &[Job], x: &[f64]) -> f64 {
        let floor = self.spec.positivity_floor;
        self.decision.prob(prev, x, 0.0, 0.0).clamp(floor, 1.0 - floor)
    }

    /// Iteratively draws X → A → Y → continue? for each job.
    fn run(&self, seed: u64, intervention: Option<(usize, u8)>) -> (Vec<Job>, Option<u8>) {
        let noise = Exogenous::new(seed);
        let mut jobs: Vec<Job> = Vec::new();
        let mut natural_at_k = None;
        for j in 1..=self.spec.k_max {
            let mut x = Vec::with_capacity(self.contexts.len());
            for (c, (family, index, sd)) in self.contexts.iter().enumerate() {
                let z = index.eval(&jobs, &[], 0.0, 0.0);
                let v = match family {
                    ContextFamily::Bernoulli => {
                        f64::from(u8::from(noise.uniform(Slot::Context, j, c) < inv_logit(z)))
                    }
                    ContextFamily::Gaussian => z + sd * noise.normal(Slot::Context, j, c),
                };
                x.push(v);
            }
            let p = self.decision_probability(&jobs, &x);
            let natural = u8::from(noise.uniform(Slot::Decision, j, 0) < p);
            let passed = match intervention {
                Some((k, forced)) if k == j => {
                    natural_at_k = Some(natural);
                    forced
                }
                _ => natural,
            };
            let a = f64::from(passed);
            let mean = self.outcome_mean.eval(&jobs, &x, a, 0.0);
            let y = match self.spec.outcome.noise {
                NoiseKind::None => mean,
                NoiseKind::Gaussian => {
                    let scale = self.outcome_scale.eval(&jobs, &x, a, 0.0).max(0.0);
                    mean + scale * noise.normal(Slot::Outcome, j, 0)
                }
                NoiseKind::Rademacher => {
                    let scale = self.outcome_scale.eval(&jobs, &x, a, 0.0).max(0.0);
                    let sign = if noise.uniform(Slot::Outcome, j, 0) < 0.5 { -1.0 } else { 1.0 };
                    mean + scale * sign
                }
            };
            jobs.push(Job::new(x, passed, y));
            if j == self.spec.k_max {
                break;
            }
            let (done, prev) = jobs.split_last().expect("job just pushed");
            let pc = self.continuation.prob(prev, &done.x, f64::from(done.a), done.y);
            if noise.uniform(Slot::Continuation, j, 0) >= pc {
                break;
            }
        }
        (jobs, natural_at_k)
    }

    /// Simulates one natural panel; a pure function of `(scenario, seed)`.
    pub fn simulate_panel(&self, seed: u64) -> Panel {
        Panel::new(seed.to_string(), self.run(seed, None).0)
    }

    /// Simulates both worlds with `A_{k_star}` forced to 1 and to 0.
    pub fn simulate_world_pair(&self, k_star: usize, seed: u64) -> Result<WorldPair, SimError> {
        if k_star == 0 {
            return Err(SimError::InvalidSpec("k_star is 1-based".into()));
        }
        let (jobs_1, nat_1) = self.run(seed, Some((k_star, 1)));
        let (jobs_0, nat_0) = self.run(seed, Some((k_star, 0)));
        match (nat_1, nat_0) {
            (Some(n1), Some(n0)) => {
                debug_assert_eq!(n1, n0);
                Ok(WorldPair {
                    k_star,
                    world_1: Panel::new(seed.to_string(), jobs_1),
                    world_0: Panel::new(seed.to_string(), jobs_0),
                    natural_a: n1,
                    shared_seed: seed,
                })
            }
            _ => Err(SimError::KStarNeverReached {
                k_star,
                k: jobs_1.len(),
            }),
        }
    }
}

/// Simulates `n` natural panels with ids `1..=n`; panel `i` uses `derive_seed(seed, i)`.
pub fn simulate_panels(scenario: &Scenario, n: usize, seed: u64) -> PanelSet {
    let panels = par::map_indexed(n, |i| {
        let mut p = scenario.simulate_panel(derive_seed(seed, i as u64));
        p.id = (i + 1).to_string();
        p
    });
    PanelSet::new(panels, scenario.column_names()).expect("simulated panels satisfy the panel invariants")
}
