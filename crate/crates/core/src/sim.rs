//! Branching particle engine.
//!
//! Each replicate moves its living particles through a global time grid of
//! spacing `dt`, with observation times inserted into the grid. Inside a
//! grid interval every particle is advanced by its motion up to its next
//! clock ring; branch and immigration times are exact exponential clocks,
//! thinned against a per-tag upper bound on the rate:
//! ```text
//! candidate at t + Exp(1)/R,   accepted with probability rate(x)/R
//! ```
//! Offspring are born at the parent's death position and inherit its path
//! integrals.

use std::fmt;
use std::io::{self, Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{Advance, Boundary, DiffusionError, MotionSpec};
use crate::model::{ModelParams, OffspringLaw};
use crate::rng::{domain_tag, exponential, stream, uniform, SimRng};

pub const DEFAULT_MAX_PARTICLES: usize = 1_000_000;
pub const STOPPING_LINE_HORIZON: f64 = 1e4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("no motion registered for {0} particles")]
    MissingMotion(Tag),
    #[error("{tag} rate {rate} exceeds its thinning bound {bound} at x={x}")]
    RateBoundExceeded { tag: Tag, rate: f64, bound: f64, x: f64 },
    #[error("stopping line not reached by time {0}")]
    Timeout(f64),
    #[error("all {0} replicates went extinct before the fit window")]
    AllExtinct(usize),
    #[error("event log: {0}")]
    Io(#[from] io::Error),
    #[error("malformed event log: {0}")]
    Format(String),
}

/// Particle type. Plain particles belong to the original process; the other
/// tags are the colours of the backbone decomposition and the spine of the
/// quasi-stationary process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    Plain,
    Red,
    Blue,
    Spine,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Plain, Tag::Red, Tag::Blue, Tag::Spine];

    fn index(self) -> usize {
        self as usize
    }

    fn from_byte(b: u8) -> Option<Tag> {
        Tag::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Tag::Plain => "plain",
            Tag::Red => "red",
            Tag::Blue => "blue",
            Tag::Spine => "spine",
        };
        f.write_str(name)
    }
}

/// What happens at an accepted branch event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Offspring {
    /// Particles replacing the parent.
    pub children: Vec<Tag>,
    /// Extra particles immigrating at the branch point.
    pub immigrants: Vec<Tag>,
}

/// Spatially dependent branching and immigration.
pub trait BranchingRule: Send + Sync {
    /// Upper bound on `rate(tag, x)` over the strip.
    fn rate_bound(&self, tag: Tag) -> f64;
    fn rate(&self, tag: Tag, x: f64) -> f64;
    fn sample(&self, tag: Tag, x: f64, rng: &mut SimRng) -> Offspring;

    /// Upper bound on the rate of immigration events along a `tag` particle.
    fn immigration_bound(&self, _tag: Tag) -> f64 {
        0.0
    }

    fn immigration_rate(&self, _tag: Tag, _x: f64) -> f64 {
        0.0
    }

    fn sample_immigrants(&self, _tag: Tag, _x: f64, _rng: &mut SimRng) -> Vec<Tag> {
        Vec::new()
    }
}

/// Constant rate `beta`, offspring law `q`, offspring of the parent's tag.
#[derive(Debug, Clone)]
pub struct ConstantBranching {
    pub beta: f64,
    pub law: OffspringLaw,
}

impl ConstantBranching {
    pub fn from_params(params: &ModelParams) -> Self {
        Self { beta: params.beta, law: params.offspring.clone() }
    }
}

impl BranchingRule for ConstantBranching {
    fn rate_bound(&self, _tag: Tag) -> f64 {
        self.beta
    }

    fn rate(&self, _tag: Tag, _x: f64) -> f64 {
        self.beta
    }

    fn sample(&self, tag: Tag, _x: f64, rng: &mut SimRng) -> Offspring {
        let k = self.law.sample_with(uniform(rng));
        Offspring { children: vec![tag; k], immigrants: Vec::new() }
    }
}

/// A running integral `int f(x_u(s)) ds` carried along every line of descent.
#[derive(Clone)]
pub struct Accumulator {
    pub name: String,
    pub integrand: Arc<dyn Fn(Tag, f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for Accumulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Accumulator").field("name", &self.name).finish()
    }
}

/// Motions per tag plus the branching rule.
#[derive(Clone)]
pub struct Dynamics {
    motions: [Option<MotionSpec>; 4],
    rule: Arc<dyn BranchingRule>,
    accumulators: Vec<Accumulator>,
}

impl Dynamics {
    pub fn new(rule: Arc<dyn BranchingRule>) -> Self {
        Self { motions: [None, None, None, None], rule, accumulators: Vec::new() }
    }

    /// Plain branching Brownian motion killed outside `(0, K)`.
    pub fn plain(params: &ModelParams, k: f64) -> Result<Self, SimError> {
        let motion = MotionSpec::killed(params.clone(), k)?;
        Ok(Self::new(Arc::new(ConstantBranching::from_params(params))).with_motion(Tag::Plain, motion))
    }

    pub fn with_motion(mut self, tag: Tag, motion: MotionSpec) -> Self {
        self.motions[tag.index()] = Some(motion);
        self
    }

    pub fn with_accumulator(mut self, name: &str, integrand: Arc<dyn Fn(Tag, f64) -> f64 + Send + Sync>) -> Self {
        self.accumulators.push(Accumulator { name: name.to_string(), integrand });
        self
    }

    pub fn motion(&self, tag: Tag) -> Result<&MotionSpec, SimError> {
        self.motions[tag.index()].as_ref().ok_or(SimError::MissingMotion(tag))
    }

    pub fn rule(&self) -> &Arc<dyn BranchingRule> {
        &self.rule
    }

    pub fn accumulator_names(&self) -> Vec<&str> {
        self.accumulators.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn accumulator_index(&self, name: &str) -> Option<usize> {
        self.accumulators.iter().position(|a| a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Initial particles.
    pub roots: Vec<(f64, Tag)>,
    pub horizon: f64,
    pub dt: f64,
    /// Cap on the number of simultaneously living particles.
    pub max_particles: usize,
    pub observation_times: Vec<f64>,
    pub record_events: bool,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(x0: f64, tag: Tag, horizon: f64, dt: f64, seed: u64) -> Self {
        Self {
            roots: vec![(x0, tag)],
            horizon,
            dt,
            max_particles: DEFAULT_MAX_PARTICLES,
            observation_times: Vec::new(),
            record_events: false,
            seed,
        }
    }

    pub fn observing(mut self, times: &[f64]) -> Self {
        self.observation_times = times.to_vec();
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_events = true;
        self
    }

    pub fn capped(mut self, max_particles: usize) -> Self {
        self.max_particles = max_particles;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("horizon must be positive and finite");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.max_particles < 1 {
            return bad("particle cap must be at least 1");
        }
        if self.roots.is_empty() {
            return bad("at least one root particle is needed");
        }
        if self.observation_times.iter().any(|&t| !(0.0..=self.horizon).contains(&t)) {
            return bad("observation times must lie in [0, horizon]");
        }
        if self.observation_times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("observation times must be strictly increasing");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeathCause {
    Killed(Boundary),
    /// Replaced by the listed number of children (the ids follow in the event).
    Branched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    /// Root or child of a branch event.
    Birth { parent: Option<u64> },
    Death { cause: DeathCause, children: Vec<u64> },
    /// New particle attached to a living `source`.
    Immigration { source: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub id: u64,
    pub position: f64,
    pub tag: Tag,
    pub kind: EventKind,
}

/// Genealogical record of one run, ordered by time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub truncated: bool,
}

const RECORD_BIRTH: u8 = 1;
const RECORD_DEATH: u8 = 2;
const RECORD_IMMIGRATION: u8 = 3;
const NO_PARENT: u64 = u64::MAX;
const LOG_MAGIC: &[u8; 4] = b"SBL1";

impl EventLog {
    /// Number of living particles just after time `t`.
    pub fn population_at(&self, t: f64) -> usize {
        let mut alive: i64 = 0;
        for e in self.events.iter().take_while(|e| e.time <= t) {
            match e.kind {
                EventKind::Birth { .. } | EventKind::Immigration { .. } => alive += 1,
                EventKind::Death { .. } => alive -= 1,
            }
        }
        alive as usize
    }

    /// Living particles per tag just after `t`.
    pub fn population_by_tag(&self, t: f64) -> [usize; 4] {
        let mut counts = [0i64; 4];
        for e in self.events.iter().take_while(|e| e.time <= t) {
            match e.kind {
                EventKind::Birth { .. } | EventKind::Immigration { .. } => counts[e.tag.index()] += 1,
                EventKind::Death { .. } => counts[e.tag.index()] -= 1,
            }
        }
        counts.map(|c| c as usize)
    }

    pub fn count_kills(&self, boundary: Boundary) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Death { cause: DeathCause::Killed(b), .. } if b == boundary))
            .count()
    }

    /// Little-endian, record-framed binary encoding:
    /// ```text
    /// "SBL1" | truncated: u8 | count: u64 | records...
    /// record = kind: u8 | len: u32 | time: f64 | id: u64 | position: f64 | tag: u8 | body
    /// birth body       = parent: u64 (u64::MAX for roots)
    /// immigration body = source: u64
    /// death body       = cause: u8 (0 killed at 0, 1 killed at K, 2 branched) | n: u32 | children: n x u64
    /// ```
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        w.write_all(LOG_MAGIC)?;
        w.write_all(&[self.truncated as u8])?;
        w.write_all(&(self.events.len() as u64).to_le_bytes())?;
        let mut body = Vec::new();
        for e in &self.events {
            body.clear();
            body.extend_from_slice(&e.time.to_le_bytes());
            body.extend_from_slice(&e.id.to_le_bytes());
            body.extend_from_slice(&e.position.to_le_bytes());
            body.push(e.tag as u8);
            let kind = match &e.kind {
                EventKind::Birth { parent } => {
                    body.extend_from_slice(&parent.unwrap_or(NO_PARENT).to_le_bytes());
                    RECORD_BIRTH
                }
                EventKind::Immigration { source } => {
                    body.extend_from_slice(&source.to_le_bytes());
                    RECORD_IMMIGRATION
                }
                EventKind::Death { cause, children } => {
                    body.push(match cause {
                        DeathCause::Killed(Boundary::Zero) => 0,
                        DeathCause::Killed(Boundary::Width) => 1,
                        DeathCause::Branched => 2,
                    });
                    body.extend_from_slice(&(children.len() as u32).to_le_bytes());
                    for c in children {
                        body.extend_from_slice(&c.to_le_bytes());
                    }
                    RECORD_DEATH
                }
            };
            w.write_all(&[kind])?;
            w.write_all(&(body.len() as u32).to_le_bytes())?;
            w.write_all(&body)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_binary(&mut out).expect("writing to memory");
        out
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, SimError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LOG_MAGIC {
            return Err(SimError::Format("bad magic".into()));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let count = u64::from_le_bytes(word);
        let mut events = Vec::new();
        for _ in 0..count {
            let mut head = [0u8; 5];
            r.read_exact(&mut head)?;
            let len = u32::from_le_bytes(head[1..5].try_into().unwrap()) as usize;
            let mut body = vec![0u8; len];
            r.read_exact(&mut body)?;
            events.push(decode_record(head[0], &body)?);
        }
        Ok(Self { events, truncated: flag[0] != 0 })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SimError> {
        Self::read_binary(bytes)
    }

    /// One row per event: `time,event,id,related,position,tag,detail`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,event,id,related,position,tag,detail\n");
        for e in &self.events {
            let (name, related, detail) = match &e.kind {
                EventKind::Birth { parent } => ("birth", parent.map(|p| p.to_string()).unwrap_or_default(), String::new()),
                EventKind::Immigration { source } => ("immigration", source.to_string(), String::new()),
                EventKind::Death { cause, children } => {
                    let detail = match cause {
                        DeathCause::Killed(Boundary::Zero) => "killed_0".to_string(),
                        DeathCause::Killed(Boundary::Width) => "killed_K".to_string(),
                        DeathCause::Branched => {
                            let ids: Vec<String> = children.iter().map(|c| c.to_string()).collect();
                            format!("branched:{}", ids.join(" "))
                        }
                    };
                    ("death", String::new(), detail)
                }
            };
            out.push_str(&format!("{},{},{},{},{},{},{}\n", e.time, name, e.id, related, e.position, e.tag, detail));
        }
        out
    }
}

fn decode_record(kind: u8, body: &[u8]) -> Result<Event, SimError> {
    let short = || SimError::Format("short record".into());
    let f64_at = |o: usize| body.get(o..o + 8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).ok_or_else(short);
    let u64_at = |o: usize| body.get(o..o + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).ok_or_else(short);
    let time = f64_at(0)?;
    let id = u64_at(8)?;
    let position = f64_at(16)?;
    let tag = body.get(24).and_then(|&b| Tag::from_byte(b)).ok_or_else(|| SimError::Format("bad tag".into()))?;
    let kind = match kind {
        RECORD_BIRTH => {
            let parent = u64_at(25)?;
            EventKind::Birth { parent: (parent != NO_PARENT).then_some(parent) }
        }
        RECORD_IMMIGRATION => EventKind::Immigration { source: u64_at(25)? },
        RECORD_DEATH => {
            let cause = match body.get(25) {
                Some(0) => DeathCause::Killed(Boundary::Zero),
                Some(1) => DeathCause::Killed(Boundary::Width),
                Some(2) => DeathCause::Branched,
                _ => return Err(SimError::Format("bad death cause".into())),
            };
            let n = body.get(26..30).map(|b| u32::from_le_bytes(b.try_into().unwrap())).ok_or_else(short)? as usize;
            let children = (0..n).map(|i| u64_at(30 + 8 * i)).collect::<Result<_, _>>()?;
            EventKind::Death { cause, children }
        }
        other => return Err(SimError::Format(format!("unknown record kind {other}"))),
    };
    Ok(Event { time, id, position, tag, kind })
}

/// State of a living particle at an observation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub id: u64,
    pub tag: Tag,
    pub x: f64,
    pub birth_time: f64,
    pub integrals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub particles: Vec<ParticleState>,
}

impl Snapshot {
    pub fn count(&self) -> usize {
        self.particles.len()
    }

    pub fn count_tag(&self, tag: Tag) -> usize {
        self.particles.iter().filter(|p| p.tag == tag).count()
    }

    pub fn positions(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.x).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: EventLog,
    /// One snapshot per observation time reached before truncation.
    pub snapshots: Vec<Snapshot>,
    pub truncated: bool,
    /// Time at which the last particle died, if the population died out.
    pub extinction_time: Option<f64>,
    /// Living particles when the run stopped.
    pub alive: usize,
    /// Kills at 0 and at K.
    pub kills: [usize; 2],
    /// Number of particles ever created, roots included.
    pub created: u64,
}

#[derive(Debug, Clone)]
struct Particle {
    id: u64,
    tag: Tag,
    x: f64,
    birth_time: f64,
    branch_clock: f64,
    immigration_clock: f64,
    integrals: Vec<f64>,
}

struct Engine<'a> {
    dynamics: &'a Dynamics,
    cfg: &'a SimConfig,
    rng: SimRng,
    next_id: u64,
    log: Vec<Event>,
    kills: [usize; 2],
    rate_bounds: [f64; 4],
    immigration_bounds: [f64; 4],
    last_death: f64,
}

fn next_ring(now: f64, bound: f64, rng: &mut SimRng) -> f64 {
    if bound > 0.0 {
        now + exponential(rng) / bound
    } else {
        f64::INFINITY
    }
}

impl<'a> Engine<'a> {
    fn spawn(&mut self, tag: Tag, x: f64, time: f64, integrals: Vec<f64>, kind: EventKind) -> Particle {
        let id = self.next_id;
        self.next_id += 1;
        if self.cfg.record_events {
            self.log.push(Event { time, id, position: x, tag, kind });
        }
        let branch_clock = next_ring(time, self.rate_bounds[tag.index()], &mut self.rng);
        let immigration_clock = next_ring(time, self.immigration_bounds[tag.index()], &mut self.rng);
        Particle { id, tag, x, birth_time: time, branch_clock, immigration_clock, integrals }
    }

    /// Advances `p` from `now` to `until`. Children and immigrants are
    /// appended to `born` together with their birth times. Returns whether
    /// `p` is still alive at `until`.
    fn advance(&mut self, p: &mut Particle, mut now: f64, until: f64, born: &mut Vec<(Particle, f64)>) -> Result<bool, SimError> {
        let dynamics = self.dynamics;
        let motion = dynamics.motion(p.tag)?;
        let rule = dynamics.rule.as_ref();
        loop {
            let target = until.min(p.branch_clock).min(p.immigration_clock);
            if target > now {
                let integrals = &mut p.integrals;
                let accumulators = &dynamics.accumulators;
                let tag = p.tag;
                let outcome = motion.advance_with(p.x, target - now, self.cfg.dt, &mut self.rng, |a, b, h| {
                    for (acc, value) in accumulators.iter().zip(integrals.iter_mut()) {
                        *value += 0.5 * h * ((acc.integrand)(tag, a) + (acc.integrand)(tag, b));
                    }
                })?;
                match outcome {
                    Advance::Alive(x) => p.x = x,
                    Advance::Killed { boundary, elapsed } => {
                        let time = (now + elapsed).min(target);
                        self.kills[(boundary == Boundary::Width) as usize] += 1;
                        self.last_death = self.last_death.max(time);
                        if self.cfg.record_events {
                            let position = if boundary == Boundary::Zero { 0.0 } else { motion.width() };
                            self.log.push(Event {
                                time,
                                id: p.id,
                                position,
                                tag: p.tag,
                                kind: EventKind::Death { cause: DeathCause::Killed(boundary), children: Vec::new() },
                            });
                        }
                        return Ok(false);
                    }
                }
                now = target;
            }
            if now >= until && p.branch_clock > until && p.immigration_clock > until {
                return Ok(true);
            }
            if p.branch_clock <= p.immigration_clock && p.branch_clock <= until {
                let bound = self.rate_bounds[p.tag.index()];
                let rate = rule.rate(p.tag, p.x);
                if rate > bound * (1.0 + 1e-12) {
                    return Err(SimError::RateBoundExceeded { tag: p.tag, rate, bound, x: p.x });
                }
                if uniform(&mut self.rng) * bound < rate {
                    self.branch(p, now, born);
                    return Ok(false);
                }
                p.branch_clock = next_ring(now, bound, &mut self.rng);
            } else if p.immigration_clock <= until {
                let bound = self.immigration_bounds[p.tag.index()];
                let rate = rule.immigration_rate(p.tag, p.x);
                if rate > bound * (1.0 + 1e-12) {
                    return Err(SimError::RateBoundExceeded { tag: p.tag, rate, bound, x: p.x });
                }
                if uniform(&mut self.rng) * bound < rate {
                    let tags = rule.sample_immigrants(p.tag, p.x, &mut self.rng);
                    for tag in tags {
                        let child = self.spawn(tag, p.x, now, p.integrals.clone(), EventKind::Immigration { source: p.id });
                        born.push((child, now));
                    }
                }
                p.immigration_clock = next_ring(now, bound, &mut self.rng);
            }
        }
    }

    fn branch(&mut self, p: &Particle, now: f64, born: &mut Vec<(Particle, f64)>) {
        let offspring = self.dynamics.rule.sample(p.tag, p.x, &mut self.rng);
        self.last_death = self.last_death.max(now);
        let death_index = self.log.len();
        if self.cfg.record_events {
            self.log.push(Event {
                time: now,
                id: p.id,
                position: p.x,
                tag: p.tag,
                kind: EventKind::Death { cause: DeathCause::Branched, children: Vec::new() },
            });
        }
        let mut ids = Vec::with_capacity(offspring.children.len());
        for tag in offspring.children {
            let child = self.spawn(tag, p.x, now, p.integrals.clone(), EventKind::Birth { parent: Some(p.id) });
            ids.push(child.id);
            born.push((child, now));
        }
        if self.cfg.record_events {
            if let EventKind::Death { children, .. } = &mut self.log[death_index].kind {
                *children = ids;
            }
        }
        for tag in offspring.immigrants {
            let child = self.spawn(tag, p.x, now, p.integrals.clone(), EventKind::Immigration { source: p.id });
            born.push((child, now));
        }
    }
}

/// Runs one replicate with the given random stream.
pub fn run_branching(cfg: &SimConfig, dynamics: &Dynamics, rng: SimRng) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    for &(x, tag) in &cfg.roots {
        let motion = dynamics.motion(tag)?;
        if !(x > 0.0 && x < motion.width()) {
            return Err(SimError::InvalidConfig(format!("root position {x} outside (0, {})", motion.width())));
        }
    }
    let rule = dynamics.rule.as_ref();
    let mut engine = Engine {
        dynamics,
        cfg,
        rng,
        next_id: 0,
        log: Vec::new(),
        kills: [0, 0],
        rate_bounds: Tag::ALL.map(|t| rule.rate_bound(t)),
        immigration_bounds: Tag::ALL.map(|t| rule.immigration_bound(t)),
        last_death: 0.0,
    };
    let n_acc = dynamics.accumulators.len();
    let mut alive: Vec<Particle> = Vec::new();
    for &(x, tag) in &cfg.roots {
        let root = engine.spawn(tag, x, 0.0, vec![0.0; n_acc], EventKind::Birth { parent: None });
        alive.push(root);
    }

    let mut snapshots = Vec::with_capacity(cfg.observation_times.len());
    let mut obs = cfg.observation_times.iter().copied().peekable();
    let snapshot = |alive: &[Particle], time: f64| Snapshot {
        time,
        particles: alive
            .iter()
            .map(|p| ParticleState { id: p.id, tag: p.tag, x: p.x, birth_time: p.birth_time, integrals: p.integrals.clone() })
            .collect(),
    };
    while obs.peek() == Some(&0.0) {
        snapshots.push(snapshot(&alive, 0.0));
        obs.next();
    }

    let mut now = 0.0;
    let mut step_index: u64 = 0;
    let mut truncated = false;
    let mut extinction_time = None;
    let mut next_alive = Vec::new();
    let mut born: Vec<(Particle, f64)> = Vec::new();
    while now < cfg.horizon {
        let grid = ((step_index + 1) as f64 * cfg.dt).min(cfg.horizon);
        let until = match obs.peek() {
            Some(&t) if t < grid => t,
            _ => grid,
        };
        if until >= grid {
            step_index += 1;
        }
        next_alive.clear();
        for mut p in alive.drain(..) {
            if engine.advance(&mut p, now, until, &mut born)? {
                next_alive.push(p);
            }
            while let Some((mut child, start)) = born.pop() {
                if engine.advance(&mut child, start, until, &mut born)? {
                    next_alive.push(child);
                }
            }
        }
        std::mem::swap(&mut alive, &mut next_alive);
        now = until;
        if obs.peek() == Some(&now) {
            obs.next();
            snapshots.push(snapshot(&alive, now));
        }
        if alive.is_empty() {
            extinction_time = Some(engine.last_death);
            for t in obs.by_ref() {
                snapshots.push(Snapshot { time: t, particles: Vec::new() });
            }
            break;
        }
        if alive.len() > cfg.max_particles {
            truncated = true;
            break;
        }
    }
    let mut events = engine.log;
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(RunOutput {
        log: EventLog { events, truncated },
        snapshots,
        truncated,
        extinction_time,
        alive: alive.len(),
        kills: engine.kills,
        created: engine.next_id,
    })
}

/// Runs `replicates` independent copies in parallel; replicate `i` uses
/// stream `i` of `(cfg.seed, domain)`. Results come back in replicate order.
pub fn run_replicates<T, F>(cfg: &SimConfig, dynamics: &Dynamics, domain: &str, replicates: usize, observe: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(usize, RunOutput) -> T + Sync,
{
    let tag = domain_tag(domain);
    (0..replicates)
        .into_par_iter()
        .map(|i| run_branching(cfg, dynamics, stream(cfg.seed, tag, i as u64)).map(|out| observe(i, out)))
        .collect()
}

/// Mean and standard error of a proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub estimate: f64,
    pub stderr: f64,
}

impl Proportion {
    pub fn from_counts(successes: usize, trials: usize) -> Self {
        if trials == 0 {
            return Self { estimate: 0.0, stderr: 0.0 };
        }
        let p = successes as f64 / trials as f64;
        Self { estimate: p, stderr: (p * (1.0 - p) / trials as f64).sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalEstimate {
    /// Fraction alive (or capped) at the horizon.
    pub at_horizon: Proportion,
    /// Same at half the horizon, for the horizon-bias diagnostic.
    pub at_half_horizon: Proportion,
    pub censored_fraction: f64,
    pub replicates: usize,
}

impl SurvivalEstimate {
    /// Whether the two horizons agree within `z` joint standard errors.
    pub fn horizon_bias_ok(&self, z: f64) -> bool {
        let a = self.at_horizon;
        let b = self.at_half_horizon;
        (a.estimate - b.estimate).abs() <= z * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
    }
}

/// Monte Carlo estimate of `p_K(x)` by the proxy "alive at T"; capped runs
/// count as surviving.
pub fn estimate_survival(cfg: &SimConfig, dynamics: &Dynamics, replicates: usize) -> Result<SurvivalEstimate, SimError> {
    let mut cfg = cfg.clone();
    cfg.observation_times = vec![0.5 * cfg.horizon, cfg.horizon];
    cfg.record_events = false;
    let outcomes = run_replicates(&cfg, dynamics, "survival", replicates, |_, out| {
        let half = out.truncated || out.snapshots.first().is_some_and(|s| s.count() > 0);
        let full = out.truncated || out.snapshots.get(1).is_some_and(|s| s.count() > 0);
        (half, full, out.truncated)
    })?;
    let half = outcomes.iter().filter(|o| o.0).count();
    let full = outcomes.iter().filter(|o| o.1).count();
    let censored = outcomes.iter().filter(|o| o.2).count();
    Ok(SurvivalEstimate {
        at_horizon: Proportion::from_counts(full, replicates),
        at_half_horizon: Proportion::from_counts(half, replicates),
        censored_fraction: if replicates == 0 { 0.0 } else { censored as f64 / replicates as f64 },
        replicates,
    })
}

/// Number of lines that first leave `(0, y)` through `y`, for one particle
/// started at `x` and killed at 0.
pub fn stopping_line_count(params: &ModelParams, y: f64, x: f64, dt: f64, rng: SimRng) -> Result<usize, SimError> {
    if !(x > 0.0 && x < y) {
        return Err(SimError::InvalidConfig(format!("start {x} must lie in (0, {y})")));
    }
    let dynamics = Dynamics::plain(params, y)?;
    let cfg = SimConfig::new(x, Tag::Plain, STOPPING_LINE_HORIZON, dt, 0);
    let out = run_branching(&cfg, &dynamics, rng)?;
    if out.alive > 0 {
        return Err(SimError::Timeout(STOPPING_LINE_HORIZON));
    }
    Ok(out.kills[1])
}

/// Mean over surviving replicates of the least-squares slope of
/// `log |N_t|` on `[T/2, T]`.
pub fn growth_rate_estimate(cfg: &SimConfig, dynamics: &Dynamics, replicates: usize, fit_points: usize) -> Result<GrowthEstimate, SimError> {
    let mut cfg = cfg.clone();
    let points = fit_points.max(2);
    cfg.observation_times = (0..points)
        .map(|i| 0.5 * cfg.horizon * (1.0 + i as f64 / (points - 1) as f64))
        .collect();
    let slopes: Vec<Option<f64>> = run_replicates(&cfg, dynamics, "growth", replicates, |_, out| {
        if out.truncated || out.snapshots.len() != points || out.snapshots.iter().any(|s| s.count() == 0) {
            return None;
        }
        let xs: Vec<f64> = out.snapshots.iter().map(|s| s.time).collect();
        let ys: Vec<f64> = out.snapshots.iter().map(|s| (s.count() as f64).ln()).collect();
        Some(least_squares_slope(&xs, &ys))
    })?;
    let used: Vec<f64> = slopes.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(SimError::AllExtinct(replicates));
    }
    let n = used.len() as f64;
    let mean = used.iter().sum::<f64>() / n;
    let var = if used.len() > 1 { used.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(GrowthEstimate { slope: mean, stderr: (var / n).sqrt(), surviving: used.len(), replicates })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthEstimate {
    pub slope: f64,
    pub stderr: f64,
    pub surviving: usize,
    pub replicates: usize,
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
