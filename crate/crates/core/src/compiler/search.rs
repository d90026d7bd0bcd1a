//! Candidate programs and the deterministic candidate streams that explore
//! instruction × exemplar-subset space.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{HashMap, HashSet, VecDeque};

use crate::canonical::{self, CanonicalError};
use crate::metrics::Objective;
use crate::rng::{PinnedRng, SEARCH_STREAM};
use crate::taskspec::DecodingParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RandomSearch,
    GreedyCoordinate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub instructions: Vec<String>,
    pub max_exemplars: usize,
    /// Maximum number of uncached LM requests during search.
    pub budget: u64,
    pub strategy: Strategy,
    pub seed: u64,
    pub objective: Objective,
    pub workers: usize,
}

impl SearchConfig {
    /// Structural problems, independent of the dataset.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.instructions.is_empty() {
            out.push("search.instructions must list at least one instruction".into());
        }
        if self.instructions.iter().any(|i| i.trim().is_empty()) {
            out.push("search.instructions must not contain empty strings".into());
        }
        let unique: HashSet<&String> = self.instructions.iter().collect();
        if unique.len() != self.instructions.len() {
            out.push("search.instructions must be unique".into());
        }
        if self.budget == 0 {
            out.push("search.budget must be positive".into());
        }
        if self.workers == 0 {
            out.push("search.workers must be at least 1".into());
        }
        out
    }
}

/// One point of the search space. Exemplar ids are kept in id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProgram {
    pub instruction: String,
    pub exemplars: Vec<String>,
    pub params: DecodingParams,
    pub candidate_id: String,
}

#[derive(Serialize)]
struct CandidateIdentity<'a> {
    instruction: &'a str,
    exemplars: &'a [String],
    params: &'a DecodingParams,
}

impl CandidateProgram {
    pub fn new(
        instruction: impl Into<String>,
        mut exemplars: Vec<String>,
        params: DecodingParams,
    ) -> Result<Self, CanonicalError> {
        let instruction = instruction.into();
        exemplars.sort();
        let candidate_id = canonical::content_hash(&CandidateIdentity {
            instruction: &instruction,
            exemplars: &exemplars,
            params: &params,
        })?;
        Ok(Self {
            instruction,
            exemplars,
            params,
            candidate_id,
        })
    }
}

/// Preference order used everywhere a winner is chosen: higher value, then
/// fewer exemplars, then shorter instruction (bytes), then lower id.
/// `Ordering::Less` means `a` is preferred.
pub fn preference(a: (f64, &CandidateProgram), b: (f64, &CandidateProgram)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.exemplars.len().cmp(&b.1.exemplars.len()))
        .then(a.1.instruction.len().cmp(&b.1.instruction.len()))
        .then(a.1.candidate_id.cmp(&b.1.candidate_id))
}

fn binomial_saturating(n: u128, k: u128) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Number of distinct candidates: |instructions| × Σ_{s≤k} C(n, s).
pub fn space_size(instructions: usize, train: usize, max_exemplars: usize) -> u128 {
    let k = max_exemplars.min(train) as u128;
    let subsets = (0..=k).fold(0u128, |acc, s| {
        acc.saturating_add(binomial_saturating(train as u128, s))
    });
    subsets.saturating_mul(instructions as u128)
}

type Point = (usize, Vec<String>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sweep {
    Instructions,
    Exemplars,
}

/// The immutable description of the search space.
#[derive(Debug)]
struct Space {
    instructions: Vec<String>,
    train_ids: Vec<String>,
    max_exemplars: usize,
    params: DecodingParams,
}

impl Space {
    fn build(&self, (instr, exemplars): &Point) -> CandidateProgram {
        CandidateProgram::new(
            self.instructions[*instr].clone(),
            exemplars.clone(),
            self.params.clone(),
        )
        .expect("candidate fields are finite")
    }

    /// One coordinate sweep around `(instr, set)`: every instruction at the
    /// current exemplars, or every single add/remove/swap of one exemplar.
    fn neighbours(&self, sweep: Sweep, (instr, set): &Point) -> Vec<Point> {
        match sweep {
            Sweep::Instructions => (0..self.instructions.len()).map(|j| (j, set.clone())).collect(),
            Sweep::Exemplars => {
                let outside: Vec<&String> = self.train_ids.iter().filter(|t| !set.contains(t)).collect();
                let mut out = Vec::new();
                if set.len() < self.max_exemplars {
                    for t in &outside {
                        let mut s = set.clone();
                        s.push((*t).clone());
                        out.push((*instr, s));
                    }
                }
                for i in 0..set.len() {
                    let mut s = set.clone();
                    s.remove(i);
                    out.push((*instr, s));
                }
                for i in 0..set.len() {
                    for t in &outside {
                        let mut s = set.clone();
                        s[i] = (*t).clone();
                        out.push((*instr, s));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug)]
struct Greedy {
    current: Option<(Point, CandidateProgram)>,
    next_sweep: Sweep,
    sweep_open: bool,
    pending: VecDeque<Point>,
    /// Candidates proposed by the open sweep, with their points.
    proposed: Vec<(Point, CandidateProgram)>,
    stale_sweeps: u32,
}

#[derive(Debug)]
enum Mode {
    Random { rng: PinnedRng, space_size: u128 },
    Greedy(Greedy),
}

/// Deterministic, duplicate-free stream of candidates.
///
/// Random search ignores feedback. Greedy coordinate search moves to the
/// preferred point after each sweep, so callers feed results back through
/// [`CandidateStream::observe`]; unobserved candidates never win a move.
/// The greedy stream ends after two consecutive sweeps without a move.
#[derive(Debug)]
pub struct CandidateStream {
    space: Space,
    seen: HashSet<String>,
    values: HashMap<String, f64>,
    mode: Mode,
}

pub fn enumerate_candidates(cfg: &SearchConfig, train_ids: &[String], params: &DecodingParams) -> CandidateStream {
    let mut train_ids = train_ids.to_vec();
    train_ids.sort();
    train_ids.dedup();
    let k = cfg.max_exemplars.min(train_ids.len());
    let mode = match cfg.strategy {
        Strategy::RandomSearch => Mode::Random {
            rng: PinnedRng::new(cfg.seed, SEARCH_STREAM),
            space_size: space_size(cfg.instructions.len(), train_ids.len(), k),
        },
        Strategy::GreedyCoordinate => Mode::Greedy(Greedy {
            current: None,
            next_sweep: Sweep::Instructions,
            sweep_open: false,
            pending: VecDeque::new(),
            proposed: Vec::new(),
            stale_sweeps: 0,
        }),
    };
    CandidateStream {
        space: Space {
            instructions: cfg.instructions.clone(),
            train_ids,
            max_exemplars: k,
            params: params.clone(),
        },
        seen: HashSet::new(),
        values: HashMap::new(),
        mode,
    }
}

impl CandidateStream {
    pub fn observe(&mut self, candidate_id: &str, value: f64) {
        self.values.insert(candidate_id.to_string(), value);
    }

    fn next_random(&mut self) -> Option<CandidateProgram> {
        let Mode::Random { rng, space_size } = &mut self.mode else {
            unreachable!("random mode")
        };
        if self.seen.len() as u128 >= *space_size {
            return None;
        }
        let space = &self.space;
        let n = space.train_ids.len();
        loop {
            let instr = rng.below(space.instructions.len());
            let size = rng.below(space.max_exemplars + 1);
            let mut pool = space.train_ids.clone();
            for i in 0..size {
                let j = i + rng.below(n - i);
                pool.swap(i, j);
            }
            pool.truncate(size);
            let cand = space.build(&(instr, pool));
            if self.seen.insert(cand.candidate_id.clone()) {
                return Some(cand);
            }
        }
    }

    fn next_greedy(&mut self) -> Option<CandidateProgram> {
        let Mode::Greedy(g) = &mut self.mode else {
            unreachable!("greedy mode")
        };
        let space = &self.space;
        if space.instructions.is_empty() {
            return None;
        }
        let value = |c: &CandidateProgram| self.values.get(&c.candidate_id).copied().unwrap_or(f64::NEG_INFINITY);
        let Some((current_point, current)) = g.current.clone() else {
            let start: Point = (0, Vec::new());
            let cand = space.build(&start);
            self.seen.insert(cand.candidate_id.clone());
            g.current = Some((start, cand.clone()));
            return Some(cand);
        };
        loop {
            if let Some(point) = g.pending.pop_front() {
                let cand = space.build(&point);
                if self.seen.insert(cand.candidate_id.clone()) {
                    g.proposed.push((point, cand.clone()));
                    return Some(cand);
                }
                continue;
            }
            if g.sweep_open {
                g.sweep_open = false;
                let mut best = (&current_point, &current);
                for (point, cand) in &g.proposed {
                    if preference((value(cand), cand), (value(best.1), best.1)) == Ordering::Less {
                        best = (point, cand);
                    }
                }
                if best.1.candidate_id != current.candidate_id {
                    g.current = Some((best.0.clone(), best.1.clone()));
                    g.stale_sweeps = 0;
                } else {
                    g.stale_sweeps += 1;
                }
                g.proposed.clear();
                if g.stale_sweeps >= 2 {
                    return None;
                }
                // Re-enter with the possibly moved current point.
                return self.next_greedy();
            }
            let sweep = g.next_sweep;
            g.next_sweep = match sweep {
                Sweep::Instructions => Sweep::Exemplars,
                Sweep::Exemplars => Sweep::Instructions,
            };
            g.pending = space.neighbours(sweep, &current_point).into();
            g.sweep_open = true;
        }
    }
}

impl Iterator for CandidateStream {
    type Item = CandidateProgram;

    fn next(&mut self) -> Option<CandidateProgram> {
        match self.mode {
            Mode::Random { .. } => self.next_random(),
            Mode::Greedy(_) => self.next_greedy(),
        }
    }
}
