//! Adversarial actor-critic synthesis of the safety critic.
//!
//! The critic `Q(x, u, d)` regresses onto the discounted Isaacs target
//! `(1 - gamma) g' + gamma min{g', Q'(x', u', d')}`, the disturbance actor
//! descends the critic on a faster timescale than the controller actor ascends
//! it, and the target critic tracks the critic by Polyak averaging. A second
//! phase trains a best-response disturbance against a frozen critic and a
//! library of controllers.

mod mlp;

pub use mlp::{Mlp, MlpSpec, OutputMap, RmsProp, Tape};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::BlackBoxSystem;
use crate::error::{config_err, Error, Result};
use crate::filters::{QCertificate, TaskController};
use crate::grid::{Bounds, Discretization, Grid, ScalarField, MAX_DIM};
use crate::harness::DisturbancePolicy;
use crate::isaacs::Game;

/// A state-control-disturbance value.
pub trait QFunction {
    fn q(&self, x: &[f64], u: &[f64], d: &[f64]) -> f64;
}

/// A disturbance that observes the state and the control.
pub trait DstbActor {
    fn act(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

impl QFunction for Mlp {
    fn q(&self, x: &[f64], u: &[f64], d: &[f64]) -> f64 {
        self.forward_one(&concat(&[x, u, d]))[0]
    }
}

impl TaskController for Mlp {
    fn control(&self, x: &[f64]) -> Vec<f64> {
        self.forward_one(x)
    }
}

impl DstbActor for Mlp {
    fn act(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.forward_one(&concat(&[x, u]))
    }
}

/// Runtime plug-in disturbance `d = actor(x, u)`.
pub struct NeuralDisturbance<'a>(pub &'a Mlp);

impl DisturbancePolicy for NeuralDisturbance<'_> {
    fn disturbance(&mut self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.0.act(x, u)
    }
}

/// How a grid value field is lifted to a function of `(x, u, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QLift {
    /// `min{ g(x), V(f(x, u, d)) }`.
    Min,
    /// `V(f(x, u, d))`, the fixed point of the critic loss.
    Next,
}

/// Table-lookup critic built from a grid value field.
pub struct GridQ<'a, S: BlackBoxSystem + ?Sized> {
    pub field: &'a ScalarField,
    pub system: &'a S,
    pub lift: QLift,
}

impl<S: BlackBoxSystem + ?Sized> QFunction for GridQ<'_, S> {
    fn q(&self, x: &[f64], u: &[f64], d: &[f64]) -> f64 {
        let mut next = [0.0; MAX_DIM];
        let next = &mut next[..x.len()];
        self.system.transition(x, u, d, next);
        let v = self.field.eval(next).0;
        match self.lift {
            QLift::Min => self.system.margin(x).min(v),
            QLift::Next => v,
        }
    }
}

/// Grid fallback policy as a controller.
pub struct GridFallback<'a, S: BlackBoxSystem + ?Sized> {
    pub field: &'a ScalarField,
    pub game: Game<'a, S>,
}

impl<S: BlackBoxSystem + ?Sized> TaskController for GridFallback<'_, S> {
    fn control(&self, x: &[f64]) -> Vec<f64> {
        let (i, _) = self.game.fallback_index(self.field, x);
        self.game.controls.get(i).to_vec()
    }
}

impl<S: BlackBoxSystem + ?Sized> DstbActor for GridFallback<'_, S> {
    /// Worst-case disturbance against `u`.
    fn act(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (_, i) = self.game.robust_q_index(self.field, x, u);
        self.game.dstbs.get(i).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub g_next: f64,
    pub x_next: Vec<f64>,
}

impl Transition {
    /// Steps `system` and records the margin of the successor.
    pub fn simulate<S: BlackBoxSystem + ?Sized>(system: &S, x: &[f64], u: &[f64], d: &[f64]) -> Self {
        let mut x_next = vec![0.0; x.len()];
        system.transition(x, u, d, &mut x_next);
        Self { x: x.to_vec(), u: u.to_vec(), d: d.to_vec(), g_next: system.margin(&x_next), x_next }
    }
}

/// Bounded FIFO with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    head: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new(), head: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, evicting the oldest item when full.
    pub fn push(&mut self, t: T) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Vec<&'a T> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    pub anneal_steps: u64,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        Self { initial: 0.85, final_value: 0.9999, anneal_steps: 120_000 }
    }
}

impl GammaSchedule {
    /// Linear interpolation, constant after `anneal_steps`.
    pub fn at(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.final_value;
        }
        let s = step as f64 / self.anneal_steps as f64;
        self.initial + (self.final_value - self.initial) * s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: GammaSchedule,
    pub lr_critic: f64,
    pub lr_ctrl: f64,
    pub lr_dstb: f64,
    pub tau: f64,
    /// Standard deviation of the Gaussian exploration noise as a fraction of
    /// each box half-width; noisy inputs are clipped to the box.
    pub exploration_noise: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub buffer_capacity: usize,
    /// Initial steps with uniformly random inputs before updates start.
    pub warmup_steps: u64,
    pub episode_horizon: u64,
    pub eval_episodes: usize,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    /// Episodes start uniformly in this box.
    pub reset_lower: Vec<f64>,
    pub reset_upper: Vec<f64>,
    /// Independent runs a driver launches, seeded `seed`, `seed + 1`, ...
    pub runs: usize,
    /// Set by the driver from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: GammaSchedule::default(),
            lr_critic: 1e-3,
            lr_ctrl: 1e-4,
            lr_dstb: 4e-4,
            tau: 0.005,
            exploration_noise: 0.2,
            batch_size: 128,
            total_steps: 200_000,
            eval_interval: 20_000,
            buffer_capacity: 100_000,
            warmup_steps: 2_000,
            episode_horizon: 200,
            eval_episodes: 20,
            critic_hidden: vec![64, 64],
            actor_hidden: vec![64, 64],
            reset_lower: vec![-1.2, -8.0],
            reset_upper: vec![1.2, 8.0],
            runs: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `k = lr_dstb / lr_ctrl`.
    pub fn timescale_ratio(&self) -> f64 {
        self.lr_dstb / self.lr_ctrl
    }

    pub fn reset_box(&self) -> Result<Bounds> {
        Bounds::new(self.reset_lower.clone(), self.reset_upper.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gamma;
        for (name, v) in [("gamma.initial", g.initial), ("gamma.final", g.final_value)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(config_err!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [("lr_critic", self.lr_critic), ("lr_ctrl", self.lr_ctrl), ("lr_dstb", self.lr_dstb)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.lr_dstb > 0.0) {
            return Err(config_err!("lr_dstb must be positive"));
        }
        if self.lr_ctrl > 0.0 && !(self.timescale_ratio() > 1.0) {
            return Err(config_err!(
                "timescale ratio lr_dstb / lr_ctrl must exceed 1, got {}",
                self.timescale_ratio()
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(config_err!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.exploration_noise.is_finite() && self.exploration_noise >= 0.0) {
            return Err(config_err!("exploration_noise must be non-negative"));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(config_err!("need batch_size >= 1 and buffer_capacity >= batch_size"));
        }
        if self.eval_interval == 0 || self.episode_horizon == 0 {
            return Err(config_err!("eval_interval and episode_horizon must be positive"));
        }
        if self.critic_hidden.contains(&0) || self.actor_hidden.contains(&0) {
            return Err(config_err!("hidden layer widths must be positive"));
        }
        self.reset_box()?;
        Ok(())
    }
}

/// Critic, target critic and the two actors.
#[derive(Debug, Clone, PartialEq)]
pub struct Agents {
    pub critic: Mlp,
    pub target: Mlp,
    pub ctrl: Mlp,
    pub dstb: Mlp,
}

impl Agents {
    pub fn new<S: BlackBoxSystem + ?Sized>(system: &S, config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let sbox = config.reset_box()?;
        let (ubox, dbox) = (system.control_box(), system.dstb_box());
        let critic_spec = MlpSpec::new(&[&sbox, ubox, dbox], &config.critic_hidden, OutputMap::Identity, 1);
        let ctrl_spec = MlpSpec::new(&[&sbox], &config.actor_hidden, OutputMap::squash(ubox), ubox.dim());
        let critic = Mlp::new(critic_spec, rng)?;
        let ctrl = Mlp::new(ctrl_spec, rng)?;
        let dstb = Mlp::new(dstb_spec(system, &sbox, &config.actor_hidden), rng)?;
        Ok(Self { target: critic.clone(), critic, ctrl, dstb })
    }
}

/// Architecture of a disturbance actor on `(x, u)`.
pub fn dstb_spec<S: BlackBoxSystem + ?Sized>(system: &S, state_box: &Bounds, hidden: &[usize]) -> MlpSpec {
    let dbox = system.dstb_box();
    MlpSpec::new(&[state_box, system.control_box()], hidden, OutputMap::squash(dbox), dbox.dim())
}

/// `(1 - gamma) g' + gamma min{ g', Q'(x', u', d') }` with `u' = ctrl(x')` and
/// `d' = dstb(x', u')`.
pub fn critic_target(
    t: &Transition,
    target: &impl QFunction,
    ctrl: &impl TaskController,
    dstb: &impl DstbActor,
    gamma_env: f64,
) -> f64 {
    let u = ctrl.control(&t.x_next);
    let d = dstb.act(&t.x_next, &u);
    let q = target.q(&t.x_next, &u, &d);
    (1.0 - gamma_env) * t.g_next + gamma_env * t.g_next.min(q)
}

/// Mean squared Bellman residual with the target held constant.
pub fn critic_loss(
    batch: &[&Transition],
    critic: &impl QFunction,
    target: &impl QFunction,
    ctrl: &impl TaskController,
    dstb: &impl DstbActor,
    gamma_env: f64,
) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|t| {
            let r = critic.q(&t.x, &t.u, &t.d) - critic_target(t, target, ctrl, dstb, gamma_env);
            r * r
        })
        .sum::<f64>()
        / n
}

/// Batched targets, equal to [`critic_target`] sample by sample.
pub fn batch_targets(batch: &[&Transition], agents: &Agents, gamma_env: f64) -> Vec<f64> {
    let b = batch.len();
    let xn: Vec<f64> = batch.iter().flat_map(|t| t.x_next.iter().copied()).collect();
    let u = agents.ctrl.predict(&xn, b);
    let du = agents.dstb.predict(&interleave(&xn, &u, b), b);
    let q = agents.target.predict(&interleave3(&xn, &u, &du, b), b);
    batch
        .iter()
        .zip(q)
        .map(|(t, q)| (1.0 - gamma_env) * t.g_next + gamma_env * t.g_next.min(q))
        .collect()
}

fn interleave(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let (na, nb) = (a.len() / n, b.len() / n);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        out.extend_from_slice(&a[s * na..(s + 1) * na]);
        out.extend_from_slice(&b[s * nb..(s + 1) * nb]);
    }
    out
}

fn interleave3(a: &[f64], b: &[f64], c: &[f64], n: usize) -> Vec<f64> {
    let (na, nb, nc) = (a.len() / n, b.len() / n, c.len() / n);
    let mut out = Vec::with_capacity(a.len() + b.len() + c.len());
    for s in 0..n {
        out.extend_from_slice(&a[s * na..(s + 1) * na]);
        out.extend_from_slice(&b[s * nb..(s + 1) * nb]);
        out.extend_from_slice(&c[s * nc..(s + 1) * nc]);
    }
    out
}

/// Columns `[lo, hi)` of each row.
fn columns(a: &[f64], n: usize, lo: usize, hi: usize) -> Vec<f64> {
    let w = a.len() / n;
    (0..n).flat_map(|s| a[s * w + lo..s * w + hi].iter().copied()).collect()
}

/// Critic loss against fixed `targets` and its gradient in the critic
/// parameters. Also returns the mean critic value.
pub fn critic_loss_grad(critic: &Mlp, inputs: &[f64], targets: &[f64]) -> (f64, Vec<f64>, f64) {
    let b = targets.len();
    let (q, tape) = critic.forward(inputs, b);
    let mut loss = 0.0;
    let gout: Vec<f64> = q
        .iter()
        .zip(targets)
        .map(|(q, y)| {
            loss += (q - y) * (q - y);
            2.0 * (q - y) / b as f64
        })
        .collect();
    let mut grad = vec![0.0; critic.param_count()];
    critic.backward(&tape, &gout, Some(&mut grad));
    (loss / b as f64, grad, q.iter().sum::<f64>() / b as f64)
}

/// Mean `Q(x, u, dstb(x, u))` over rows of `xu` and its gradient in the
/// disturbance parameters.
pub fn dstb_objective_grad(critic: &Mlp, dstb: &Mlp, xu: &[f64], batch: usize) -> (f64, Vec<f64>) {
    let (d, dtape) = dstb.forward(xu, batch);
    let cin = interleave(xu, &d, batch);
    let (q, ctape) = critic.forward(&cin, batch);
    let gout = vec![1.0 / batch as f64; batch];
    let gin = critic.backward(&ctape, &gout, None);
    let w = xu.len() / batch;
    let gd = columns(&gin, batch, w, gin.len() / batch);
    let mut grad = vec![0.0; dstb.param_count()];
    dstb.backward(&dtape, &gd, Some(&mut grad));
    (q.iter().sum::<f64>() / batch as f64, grad)
}

/// Mean `Q(x, ctrl(x), dstb(x, ctrl(x)))` and its gradient in the controller
/// parameters (through both the direct and the disturbance path).
pub fn ctrl_objective_grad(critic: &Mlp, dstb: &Mlp, ctrl: &Mlp, xs: &[f64], batch: usize) -> (f64, Vec<f64>) {
    let n = xs.len() / batch;
    let (u, utape) = ctrl.forward(xs, batch);
    let m = u.len() / batch;
    let xu = interleave(xs, &u, batch);
    let (d, dtape) = dstb.forward(&xu, batch);
    let cin = interleave(&xu, &d, batch);
    let (q, ctape) = critic.forward(&cin, batch);
    let gout = vec![1.0 / batch as f64; batch];
    let gin = critic.backward(&ctape, &gout, None);
    let w = gin.len() / batch;
    let gd = columns(&gin, batch, n + m, w);
    let gxu = dstb.backward(&dtape, &gd, None);
    let mut gu = columns(&gin, batch, n, n + m);
    for (g, h) in gu.iter_mut().zip(columns(&gxu, batch, n, n + m)) {
        *g += h;
    }
    let mut grad = vec![0.0; ctrl.param_count()];
    ctrl.backward(&utape, &gu, Some(&mut grad));
    (q.iter().sum::<f64>() / batch as f64, grad)
}

/// Optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub critic: RmsProp,
    pub ctrl: RmsProp,
    pub dstb: RmsProp,
}

impl Optimizers {
    pub fn new(agents: &Agents, config: &TrainConfig) -> Self {
        Self {
            critic: RmsProp::new(agents.critic.param_count(), config.lr_critic),
            ctrl: RmsProp::new(agents.ctrl.param_count(), config.lr_ctrl),
            dstb: RmsProp::new(agents.dstb.param_count(), config.lr_dstb),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub critic_loss: f64,
    pub mean_q: f64,
    pub dstb_objective: f64,
    pub ctrl_objective: f64,
}

fn finite(step: u64, what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical { step, what: String::from(what) })
    }
}

/// One descent-ascent iteration: critic, disturbance (descent), controller
/// (ascent), then the target update.
pub fn gda_step(
    agents: &mut Agents,
    opt: &mut Optimizers,
    batch: &[&Transition],
    config: &TrainConfig,
    gamma_env: f64,
    step: u64,
) -> Result<StepStats> {
    let b = batch.len();
    let targets = batch_targets(batch, agents, gamma_env);
    let inputs: Vec<f64> = batch.iter().flat_map(|t| t.x.iter().chain(&t.u).chain(&t.d).copied()).collect();
    let (loss, grad, mean_q) = critic_loss_grad(&agents.critic, &inputs, &targets);
    finite(step, "critic loss", &[loss])?;
    finite(step, "critic gradient", &grad)?;
    opt.critic.descend(agents.critic.params_mut(), &grad);

    let xu: Vec<f64> = batch.iter().flat_map(|t| t.x.iter().chain(&t.u).copied()).collect();
    let (dobj, grad) = dstb_objective_grad(&agents.critic, &agents.dstb, &xu, b);
    finite(step, "disturbance gradient", &grad)?;
    opt.dstb.descend(agents.dstb.params_mut(), &grad);

    let xs: Vec<f64> = batch.iter().flat_map(|t| t.x.iter().copied()).collect();
    let (cobj, mut grad) = ctrl_objective_grad(&agents.critic, &agents.dstb, &agents.ctrl, &xs, b);
    finite(step, "controller gradient", &grad)?;
    for g in grad.iter_mut() {
        *g = -*g;
    }
    opt.ctrl.descend(agents.ctrl.params_mut(), &grad);

    agents.target.soft_update(&agents.critic, config.tau);
    finite(step, "critic parameters", agents.critic.params())?;
    Ok(StepStats { critic_loss: loss, mean_q, dstb_objective: dobj, ctrl_objective: cobj })
}

/// Networks saved at an evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub gamma_env: f64,
    pub agents: Agents,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub critic_loss: f64,
    pub mean_q: f64,
    pub eval_safe_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
}

fn uniform_in(b: &Bounds, rng: &mut impl Rng) -> Vec<f64> {
    b.lower().iter().zip(b.upper()).map(|(l, h)| if l == h { *l } else { rng.random_range(*l..*h) }).collect()
}

fn add_noise(v: &mut [f64], b: &Bounds, scale: f64, rng: &mut impl Rng) {
    if scale > 0.0 {
        for (c, h) in v.iter_mut().zip(b.half_width()) {
            let z: f64 = rng.sample(StandardNormal);
            *c += scale * h * z;
        }
    }
    b.clamp(v);
}

/// Fraction of episodes from fixed non-failing starts that stay safe for the
/// episode horizon with the deterministic actors.
fn eval_safe_rate<S: BlackBoxSystem + ?Sized>(system: &S, agents: &Agents, starts: &[Vec<f64>], horizon: u64) -> f64 {
    if starts.is_empty() {
        return 0.0;
    }
    let mut next = vec![0.0; system.state_dim()];
    let mut safe = 0usize;
    for x0 in starts {
        let mut x = x0.clone();
        let mut ok = true;
        for _ in 0..horizon {
            let u = agents.ctrl.control(&x);
            let d = agents.dstb.act(&x, &u);
            system.transition(&x, &u, &d, &mut next);
            x.copy_from_slice(&next);
            if system.margin(&x) < 0.0 {
                ok = false;
                break;
            }
        }
        safe += ok as usize;
    }
    safe as f64 / starts.len() as f64
}

/// Episodic adversarial training. `on_checkpoint` sees every checkpoint as it
/// is produced.
pub fn train_isaacs<S: BlackBoxSystem + ?Sized>(
    system: &S,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint, &LogRow) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    if config.reset_lower.len() != system.state_dim() {
        return Err(config_err!("reset box has dimension {}, system state {}", config.reset_lower.len(), system.state_dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
    let reset = config.reset_box()?;
    let mut agents = Agents::new(system, config, &mut rng)?;
    let mut opt = Optimizers::new(&agents, config);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let starts: Vec<Vec<f64>> = (0..config.eval_episodes * 100)
        .map(|_| uniform_in(&reset, &mut eval_rng))
        .filter(|x| system.margin(x) >= 0.0)
        .take(config.eval_episodes)
        .collect();

    let (ubox, dbox) = (system.control_box().clone(), system.dstb_box().clone());
    let mut x = uniform_in(&reset, &mut rng);
    let mut t_ep = 0u64;
    let mut out = TrainOutput { checkpoints: Vec::new(), log: Vec::new() };
    let (mut loss_sum, mut q_sum, mut n_upd) = (0.0, 0.0, 0u64);
    for step in 0..config.total_steps {
        let gamma = config.gamma.at(step);
        let (u, d) = if step < config.warmup_steps {
            let u = uniform_in(&ubox, &mut rng);
            let d = uniform_in(&dbox, &mut rng);
            (u, d)
        } else {
            let mut u = agents.ctrl.control(&x);
            add_noise(&mut u, &ubox, config.exploration_noise, &mut rng);
            let mut d = agents.dstb.act(&x, &u);
            add_noise(&mut d, &dbox, config.exploration_noise, &mut rng);
            (u, d)
        };
        let t = Transition::simulate(system, &x, &u, &d);
        t_ep += 1;
        if t.g_next < 0.0 || t_ep >= config.episode_horizon {
            x = uniform_in(&reset, &mut rng);
            t_ep = 0;
        } else {
            x.copy_from_slice(&t.x_next);
        }
        buffer.push(t);
        if step >= config.warmup_steps && buffer.len() >= config.batch_size {
            let batch = buffer.sample(config.batch_size, &mut rng);
            let s = gda_step(&mut agents, &mut opt, &batch, config, gamma, step)?;
            loss_sum += s.critic_loss;
            q_sum += s.mean_q;
            n_upd += 1;
        }
        if (step + 1) % config.eval_interval == 0 || step + 1 == config.total_steps {
            let denom = n_upd.max(1) as f64;
            let row = LogRow {
                step: step + 1,
                critic_loss: loss_sum / denom,
                mean_q: q_sum / denom,
                eval_safe_rate: eval_safe_rate(system, &agents, &starts, config.episode_horizon),
            };
            (loss_sum, q_sum, n_upd) = (0.0, 0.0, 0);
            let ck = Checkpoint { step: step + 1, seed: config.seed, gamma_env: gamma, agents: agents.clone() };
            on_checkpoint(&ck, &row)?;
            out.checkpoints.push(ck);
            out.log.push(row);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BestResponseConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_steps: u64,
    pub exploration_noise: f64,
    pub episode_horizon: u64,
    pub hidden: Vec<usize>,
    pub reset_lower: Vec<f64>,
    pub reset_upper: Vec<f64>,
    /// Set by the driver from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for BestResponseConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            lr: 5e-4,
            batch_size: 128,
            buffer_capacity: 50_000,
            warmup_steps: 1_000,
            exploration_noise: 0.2,
            episode_horizon: 200,
            hidden: vec![64, 64],
            reset_lower: vec![-1.2, -8.0],
            reset_upper: vec![1.2, 8.0],
            seed: 0,
        }
    }
}

impl BestResponseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err!("best-response lr must be positive"));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size || self.episode_horizon == 0 {
            return Err(config_err!("need batch_size >= 1, buffer_capacity >= batch_size and a positive horizon"));
        }
        if !(self.exploration_noise.is_finite() && self.exploration_noise >= 0.0) {
            return Err(config_err!("exploration_noise must be non-negative"));
        }
        Bounds::new(self.reset_lower.clone(), self.reset_upper.clone())?;
        Ok(())
    }
}

/// Rolls controllers drawn uniformly from `library` (with exploration noise)
/// against `dstb` and yields the visited `(x, u)` pairs.
pub struct LibraryRollouts<'a, S: BlackBoxSystem + ?Sized> {
    system: &'a S,
    library: &'a [Mlp],
    reset: Bounds,
    noise: f64,
    horizon: u64,
    x: Vec<f64>,
    ctrl: usize,
    t: u64,
}

impl<'a, S: BlackBoxSystem + ?Sized> LibraryRollouts<'a, S> {
    pub fn new(system: &'a S, library: &'a [Mlp], reset: Bounds, noise: f64, horizon: u64, rng: &mut impl Rng) -> Result<Self> {
        if library.is_empty() {
            return Err(config_err!("the controller library is empty"));
        }
        let x = uniform_in(&reset, rng);
        let ctrl = rng.random_range(0..library.len());
        Ok(Self { system, library, reset, noise, horizon, x, ctrl, t: 0 })
    }

    /// Current `(x, u)` and one environment step against `dstb`.
    pub fn next_pair(&mut self, dstb: &Mlp, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let sys = self.system;
        let mut u = self.library[self.ctrl].control(&self.x);
        add_noise(&mut u, sys.control_box(), self.noise, rng);
        let mut d = dstb.act(&self.x, &u);
        add_noise(&mut d, sys.dstb_box(), self.noise, rng);
        let pair = (self.x.clone(), u.clone());
        let t = Transition::simulate(sys, &self.x, &u, &d);
        self.t += 1;
        if t.g_next < 0.0 || self.t >= self.horizon {
            self.x = uniform_in(&self.reset, rng);
            self.ctrl = rng.random_range(0..self.library.len());
            self.t = 0;
        } else {
            self.x = t.x_next;
        }
        pair
    }
}

/// Trains a fresh disturbance actor to minimize the frozen `critic` on `(x, u)`
/// pairs visited by the controller library.
pub fn train_best_response<S: BlackBoxSystem + ?Sized>(
    critic: &Mlp,
    library: &[Mlp],
    system: &S,
    config: &BestResponseConfig,
) -> Result<Mlp> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let reset = Bounds::new(config.reset_lower.clone(), config.reset_upper.clone())?;
    let mut dstb = Mlp::new(dstb_spec(system, &reset, &config.hidden), &mut rng)?;
    let mut opt = RmsProp::new(dstb.param_count(), config.lr);
    let mut env = LibraryRollouts::new(system, library, reset, config.exploration_noise, config.episode_horizon, &mut rng)?;
    let mut buffer: ReplayBuffer<Vec<f64>> = ReplayBuffer::new(config.buffer_capacity);
    for step in 0..config.steps {
        let (x, u) = env.next_pair(&dstb, &mut rng);
        buffer.push(concat(&[&x, &u]));
        if step >= config.warmup_steps && buffer.len() >= config.batch_size {
            let xu: Vec<f64> = buffer.sample(config.batch_size, &mut rng).into_iter().flatten().copied().collect();
            let (_, grad) = dstb_objective_grad(critic, &dstb, &xu, config.batch_size);
            finite(step, "best-response gradient", &grad)?;
            opt.descend(dstb.params_mut(), &grad);
        }
    }
    Ok(dstb)
}

/// `max_u min_d Q(x, u, d)` over discretized boxes.
pub fn max_min_q(critic: &Mlp, x: &[f64], controls: &Discretization, dstbs: &Discretization) -> f64 {
    let (nu, nd) = (controls.len(), dstbs.len());
    let mut input = Vec::with_capacity(nu * nd * critic.spec().input_dim());
    for u in controls.iter() {
        for d in dstbs.iter() {
            input.extend_from_slice(x);
            input.extend_from_slice(u);
            input.extend_from_slice(d);
        }
    }
    let q = critic.predict(&input, nu * nd);
    q.chunks_exact(nd).map(|c| c.iter().copied().fold(f64::INFINITY, f64::min)).fold(f64::NEG_INFINITY, f64::max)
}

/// Certificate value of a neural critic: `min{ g(x), max_u min_d Q(x, u, d) }`.
pub fn neural_value<S: BlackBoxSystem + ?Sized>(
    critic: &Mlp,
    system: &S,
    x: &[f64],
    controls: &Discretization,
    dstbs: &Discretization,
) -> f64 {
    system.margin(x).min(max_min_q(critic, x, controls, dstbs))
}

/// Node indices of `grid` visited with `stride` along every axis (the last
/// node of each axis is always included).
pub fn strided_nodes(grid: &Grid, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let per_axis: Vec<Vec<usize>> = grid
        .axes()
        .iter()
        .map(|a| {
            let mut v: Vec<usize> = (0..a.count).step_by(stride).collect();
            if *v.last().unwrap() != a.count - 1 {
                v.push(a.count - 1);
            }
            v
        })
        .collect();
    let mut out = vec![0usize];
    for (k, ax) in per_axis.iter().enumerate() {
        out = out.iter().flat_map(|base| ax.iter().map(move |i| base + i * grid.strides()[k])).collect();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub nodes: usize,
    pub agree: usize,
    pub rate: f64,
    pub mae: f64,
}

/// Sign agreement of `pred` with `truth` where `|truth| > min_abs`, and the
/// mean absolute error over all entries.
pub fn sign_agreement(pred: &[f64], truth: &[f64], min_abs: f64) -> Agreement {
    let mut nodes = 0;
    let mut agree = 0;
    let mut abs = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        abs += (p - t).abs();
        if t.abs() > min_abs {
            nodes += 1;
            agree += ((*p >= 0.0) == (*t >= 0.0)) as usize;
        }
    }
    let n = pred.len().max(1) as f64;
    Agreement { nodes, agree, rate: if nodes == 0 { 1.0 } else { agree as f64 / nodes as f64 }, mae: abs / n }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rho: f64,
    pub delta: f64,
    pub samples: usize,
    pub perturbations: usize,
    pub violations: usize,
    pub fraction: f64,
}

/// Fraction of (sample, perturbation) pairs where a disturbance actor with
/// parameters drawn uniformly in the radius-`rho` ball around `dstb` lowers the
/// critic by more than `delta`.
pub fn local_optimality_probe(
    dstb: &Mlp,
    critic: &Mlp,
    samples: &[(Vec<f64>, Vec<f64>)],
    rho: f64,
    n_perturbations: usize,
    delta: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(config_err!("probe radius must be a non-negative number, got {rho}"));
    }
    let b = samples.len();
    let xu: Vec<f64> = samples.iter().flat_map(|(x, u)| x.iter().chain(u).copied()).collect();
    let q_of = |actor: &Mlp| -> Vec<f64> {
        if b == 0 {
            return Vec::new();
        }
        let d = actor.predict(&xu, b);
        critic.predict(&interleave(&xu, &d, b), b)
    };
    let base = q_of(dstb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dstb.param_count();
    let mut violations = 0;
    for _ in 0..n_perturbations {
        let mut dir: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = libm::sqrt(dir.iter().map(|v| v * v).sum::<f64>());
        let u: f64 = rng.random();
        let r = rho * libm::pow(u, 1.0 / n as f64);
        let mut p = dstb.clone();
        for (w, v) in p.params_mut().iter_mut().zip(dir.iter_mut()) {
            *w += r * *v / norm;
        }
        violations += q_of(&p).iter().zip(&base).filter(|(q, q0)| **q < **q0 - delta).count();
    }
    let total = b * n_perturbations;
    Ok(ProbeReport {
        rho,
        delta,
        samples: b,
        perturbations: n_perturbations,
        violations,
        fraction: if total == 0 { 0.0 } else { violations as f64 / total as f64 },
    })
}

/// Neural plug-in certificate: the controller actor is the fallback and the
/// disturbance actor replaces the inner minimization.
pub struct NeuralCertificate<'a, S: BlackBoxSystem + ?Sized> {
    pub critic: &'a Mlp,
    pub ctrl: &'a Mlp,
    pub dstb: &'a Mlp,
    pub system: &'a S,
}

impl<S: BlackBoxSystem + ?Sized> QCertificate for NeuralCertificate<'_, S> {
    fn value(&self, x: &[f64]) -> f64 {
        self.worst_q(x, &self.ctrl.control(x))
    }

    fn worst_q(&self, x: &[f64], u: &[f64]) -> f64 {
        let d = self.dstb.act(x, u);
        self.system.margin(x).min(self.critic.q(x, u, &d))
    }

    fn fallback(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let u = self.ctrl.control(x);
        let v = self.worst_q(x, &u);
        (u, v)
    }
}

/// Agreement of a disturbance actor with the grid argmin: the network output
/// lies within `spacing` of a disturbance whose successor value is within
/// `tol` of the minimum.
pub fn matches_grid_argmin<S: BlackBoxSystem + ?Sized>(
    dstb: &Mlp,
    field: &ScalarField,
    system: &S,
    dstbs: &Discretization,
    x: &[f64],
    u: &[f64],
    tol: f64,
) -> bool {
    let d_net = dstb.act(x, u);
    let mut next = vec![0.0; x.len()];
    let vals: Vec<f64> = dstbs
        .iter()
        .map(|d| {
            system.transition(x, u, d, &mut next);
            field.eval(&next).0
        })
        .collect();
    let vmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let reach = if dstbs.spacing().is_finite() { dstbs.spacing() } else { 0.0 };
    dstbs.iter().zip(&vals).any(|(d, v)| {
        *v <= vmin + tol && d.iter().zip(&d_net).all(|(a, b)| (a - b).abs() <= reach * (1.0 + 1e-9))
    })
}

/// A readable summary of a report.
pub fn describe_probe(r: &ProbeReport) -> String {
    format!(
        "rho={} delta={} samples={} perturbations={} violations={} fraction={:.6}",
        r.rho, r.delta, r.samples, r.perturbations, r.violations, r.fraction
    )
}
