//! Seeded sampling infrastructure: reproducible, splittable streams
//! plus samplers for the regime chain, the eta chain, and the jump
//! coefficients.

use alloc::vec::Vec;

use nalgebra::DMatrix;
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::model::XiLaw;

/// SplitMix64 finalizer. Used to mix stream ids into seeds so that
/// nearby ids yield unrelated key material.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream identified by `(root_seed, stream_id)`.
///
/// The generator key is `splitmix64(splitmix64(root_seed) ^
/// splitmix64(stream_id ^ GOLDEN))`, so distinct stream ids give
/// statistically independent ChaCha streams and results do not depend
/// on how streams are distributed across workers. `substream`
/// re-derives children from the mixed key, giving a stable hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededStream {
    pub root_seed: u64,
    pub stream_id: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

impl SeededStream {
    pub fn new(root_seed: u64, stream_id: u64) -> Self {
        Self { root_seed, stream_id }
    }

    fn mixed(&self) -> u64 {
        splitmix64(splitmix64(self.root_seed) ^ splitmix64(self.stream_id ^ GOLDEN))
    }

    /// Child stream for an independent lane of draws.
    pub fn substream(&self, lane: u64) -> SeededStream {
        SeededStream::new(self.mixed(), lane)
    }

    /// Fresh generator positioned at the start of the stream.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.mixed())
    }
}

/// Piecewise-constant regime trajectory on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub initial: usize,
    /// `(jump time, regime entered)`, strictly increasing times.
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl RegimePath {
    /// Regime at time `t` (right-continuous).
    pub fn regime_at(&self, t: f64) -> usize {
        let mut r = self.initial;
        for &(tau, j) in &self.jumps {
            if tau <= t {
                r = j;
            } else {
                break;
            }
        }
        r
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("unknown xi law tag")]
    UnknownLaw,
}

/// Exact simulation of the regime chain: exponential holding times
/// with rate `-Q_ii`, next state with probability `q_ij / (-Q_ii)`.
/// A state with `Q_ii = 0` is absorbing.
pub fn sample_ctmc(generator: &DMatrix<f64>, y0: usize, horizon: f64, stream: SeededStream) -> RegimePath {
    let mut rng = stream.rng();
    let n = generator.nrows();
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut state = y0;
    loop {
        let rate = -generator[(state, state)];
        if rate <= 0.0 {
            break;
        }
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / rate;
        if t >= horizon {
            break;
        }
        // Categorical draw over j != state proportional to q_{state,j}.
        let target: f64 = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut next = state;
        for j in 0..n {
            if j == state {
                continue;
            }
            acc += generator[(state, j)];
            if target < acc {
                next = j;
                break;
            }
        }
        if next == state {
            // Rounding pushed the draw past the last bucket.
            next = (0..n).rev().find(|&j| j != state && generator[(state, j)] > 0.0).unwrap_or(state);
            if next == state {
                break;
            }
        }
        jumps.push((t, next));
        state = next;
    }
    RegimePath { initial: y0, jumps, horizon }
}

/// One step of the eta chain from state `h` under row-stochastic `p`.
pub fn step_eta<R: Rng>(p: &DMatrix<f64>, h: usize, rng: &mut R) -> usize {
    let target: f64 = rng.random();
    let mut acc = 0.0;
    let cols = p.ncols();
    for h2 in 0..cols {
        acc += p[(h, h2)];
        if target < acc {
            return h2;
        }
    }
    cols - 1
}

/// Draws `count` i.i.d. jump coefficients with mean 0 and variance 1.
pub fn sample_xi<R: Rng>(law: XiLaw, count: usize, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| match law {
            XiLaw::Rademacher => {
                if rng.random::<f64>() < 0.5 {
                    -1.0
                } else {
                    1.0
                }
            }
            XiLaw::StandardNormal => StandardNormal.sample(rng),
        })
        .collect()
}
