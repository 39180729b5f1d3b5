//! Seeded tree-structured Parzen estimator over the tuning space.
//!
//! Each coordinate is modelled independently: finished trials are split into
//! the best `gamma(n)` and the rest, a Parzen density is fitted to each group,
//! and the candidate maximizing the density ratio among draws from the good
//! density is kept. Optional rates are gated by an on/off choice and modelled
//! only over the trials where they were on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dmlp::{HyperparamSet, HIDDEN_LAYERS};
use crate::market_data::{FeatureGroup, FeatureMask};
use crate::neural::{Activation, HeadKind, HeadReg, HiddenReg};
use crate::special::norm_cdf;

use super::tuning::{SearchSpace, SearchStrategy, TrialRecord};

const N_GROUPS: usize = FeatureGroup::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq)]
enum Dim {
    /// Choice among `n` options.
    Cat(usize),
    /// Real value in `(lo, hi)` on the searched scale; when `gate` is set it
    /// exists only while that on/off coordinate is on.
    Real {
        lo: f64,
        hi: f64,
        log: bool,
        gate: Option<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct TpeSearch {
    space: SearchSpace,
    head: HeadKind,
    rng: ChaCha8Rng,
    dims: Vec<Dim>,
    /// Random trials before the model is used.
    pub startup: usize,
    /// Candidates proposed per round once the model is used.
    pub batch: usize,
    /// Draws from the good density per coordinate.
    pub candidates: usize,
}

impl TpeSearch {
    pub fn new(space: SearchSpace, head: HeadKind, seed: u64) -> Self {
        let dims = layout(&space, head);
        Self {
            space,
            head,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dims,
            startup: 16,
            batch: 4,
            candidates: 24,
        }
    }

    fn propose_one(&mut self, obs: &[(Vec<Option<f64>>, f64)]) -> HyperparamSet {
        let n_good = ((obs.len() as f64 * 0.1).ceil() as usize).clamp(1, 25);
        let mut order: Vec<usize> = (0..obs.len()).collect();
        order.sort_by(|&a, &b| obs[a].1.total_cmp(&obs[b].1).then(a.cmp(&b)));
        let (good, bad) = order.split_at(n_good);
        let mut x: Vec<Option<f64>> = vec![None; self.dims.len()];
        for (d, dim) in self.dims.clone().into_iter().enumerate() {
            let column =
                |idx: &[usize]| -> Vec<f64> { idx.iter().filter_map(|&i| obs[i].0[d]).collect() };
            let (l, g) = (column(good), column(bad));
            x[d] = match dim {
                Dim::Cat(k) => Some(self.pick_category(k, &l, &g) as f64),
                Dim::Real { gate: Some(gi), .. } if x[gi] != Some(1.0) => None,
                Dim::Real { lo, hi, log, .. } => {
                    let scale = |v: f64| if log { v.ln() } else { v };
                    let (lo_s, hi_s) = (scale(lo), scale(hi));
                    let l: Vec<f64> = l.iter().map(|&v| scale(v)).collect();
                    let g: Vec<f64> = g.iter().map(|&v| scale(v)).collect();
                    let v = self.pick_real(lo_s, hi_s, &l, &g);
                    let v = if log { v.exp() } else { v };
                    Some(v.clamp(lo * (1.0 + 1e-12) + 1e-300, hi * (1.0 - 1e-12)))
                }
            };
        }
        decode(&x, self.head, &mut self.rng)
    }

    fn pick_category(&mut self, k: usize, l: &[f64], g: &[f64]) -> usize {
        let weights = |obs: &[f64]| {
            let mut w = vec![1.0; k];
            for &v in obs {
                w[v as usize] += 1.0;
            }
            let total: f64 = w.iter().sum();
            w.into_iter().map(|v| v / total).collect::<Vec<f64>>()
        };
        let (wl, wg) = (weights(l), weights(g));
        let mut best = (f64::NEG_INFINITY, 0);
        for _ in 0..self.candidates {
            let mut u = self.rng.gen::<f64>();
            let mut c = k - 1;
            for (i, &w) in wl.iter().enumerate() {
                if u < w {
                    c = i;
                    break;
                }
                u -= w;
            }
            let ratio = wl[c].ln() - wg[c].ln();
            if ratio > best.0 {
                best = (ratio, c);
            }
        }
        best.1
    }

    fn pick_real(&mut self, lo: f64, hi: f64, l: &[f64], g: &[f64]) -> f64 {
        let pl = Parzen::fit(lo, hi, l);
        let pg = Parzen::fit(lo, hi, g);
        let mut best = (f64::NEG_INFINITY, 0.5 * (lo + hi));
        for _ in 0..self.candidates {
            let v = pl.sample(&mut self.rng);
            let ratio = pl.ln_pdf(v) - pg.ln_pdf(v);
            if ratio > best.0 {
                best = (ratio, v);
            }
        }
        best.1
    }
}

impl SearchStrategy for TpeSearch {
    fn propose(&mut self, history: &[TrialRecord], remaining: usize) -> Vec<HyperparamSet> {
        if history.len() < self.startup {
            let n = (self.startup - history.len()).min(remaining);
            return (0..n)
                .map(|_| self.space.sample(self.head, &mut self.rng))
                .collect();
        }
        let obs: Vec<(Vec<Option<f64>>, f64)> = history
            .iter()
            .map(|t| (encode(&t.params), t.score))
            .collect();
        (0..self.batch.min(remaining))
            .map(|_| self.propose_one(&obs))
            .collect()
    }
}

/// Mixture of truncated normals: a wide prior plus one kernel per point.
struct Parzen {
    lo: f64,
    hi: f64,
    mus: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Parzen {
    fn fit(lo: f64, hi: f64, points: &[f64]) -> Self {
        let width = hi - lo;
        let mut sorted = points.to_vec();
        sorted.sort_by(f64::total_cmp);
        let min_sigma = width / (1.0 + sorted.len() as f64).min(100.0);
        let mut mus = vec![0.5 * (lo + hi)];
        let mut sigmas = vec![width];
        for (i, &p) in sorted.iter().enumerate() {
            let left = p - if i == 0 { lo } else { sorted[i - 1] };
            let right = if i + 1 == sorted.len() {
                hi
            } else {
                sorted[i + 1]
            } - p;
            mus.push(p);
            sigmas.push(left.max(right).clamp(min_sigma, width));
        }
        Self {
            lo,
            hi,
            mus,
            sigmas,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let k = rng.gen_range(0..self.mus.len());
        for _ in 0..100 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let v = self.mus[k] + self.sigmas[k] * z;
            if v > self.lo && v < self.hi {
                return v;
            }
        }
        rng.gen_range(self.lo..self.hi)
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        let mut total = 0.0;
        for (&mu, &s) in self.mus.iter().zip(&self.sigmas) {
            let mass = norm_cdf((self.hi - mu) / s) - norm_cdf((self.lo - mu) / s);
            let z = (x - mu) / s;
            total +=
                (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-300));
        }
        (total / self.mus.len() as f64).max(1e-300).ln()
    }
}

fn gated_rate(dims: &mut Vec<Dim>, l1: (f64, f64)) {
    dims.push(Dim::Cat(2));
    let gate = Some(dims.len() - 1);
    dims.push(Dim::Real {
        lo: l1.0,
        hi: l1.1,
        log: true,
        gate,
    });
}

/// Coordinates in the order `encode` writes them.
fn layout(space: &SearchSpace, head: HeadKind) -> Vec<Dim> {
    let mut dims = vec![Dim::Cat(2); N_GROUPS];
    dims.push(Dim::Cat(2));
    dims.push(Dim::Real {
        lo: 0.0,
        hi: 1.0,
        log: false,
        gate: Some(N_GROUPS),
    });
    for _ in 0..HIDDEN_LAYERS {
        let (lo, hi) = space.neurons;
        dims.push(Dim::Real {
            lo: lo as f64 - 0.5,
            hi: hi as f64 + 0.5,
            log: false,
            gate: None,
        });
    }
    dims.extend([Dim::Cat(Activation::ALL.len()); HIDDEN_LAYERS]);
    for _ in 0..HIDDEN_LAYERS * 2 + head.params_per_output() * 2 {
        gated_rate(&mut dims, space.l1);
    }
    dims.push(Dim::Real {
        lo: space.learning_rate.0,
        hi: space.learning_rate.1,
        log: true,
        gate: None,
    });
    dims
}

fn push_rate(out: &mut Vec<Option<f64>>, r: Option<f64>) {
    out.push(Some(if r.is_some() { 1.0 } else { 0.0 }));
    out.push(r);
}

fn encode(h: &HyperparamSet) -> Vec<Option<f64>> {
    let flag = |b: bool| Some(if b { 1.0 } else { 0.0 });
    let mut out: Vec<Option<f64>> = h.feature_mask.0.iter().map(|&b| flag(b)).collect();
    push_rate(&mut out, h.dropout);
    out.extend(h.neurons.iter().map(|&n| Some(n as f64)));
    out.extend(
        h.activations
            .iter()
            .map(|a| Some(Activation::ALL.iter().position(|b| b == a).expect("known") as f64)),
    );
    for r in &h.hidden_l1 {
        push_rate(&mut out, r.activity);
        push_rate(&mut out, r.kernel);
    }
    for r in &h.head_l1 {
        push_rate(&mut out, r.kernel);
        push_rate(&mut out, r.bias);
    }
    out.push(Some(h.learning_rate));
    out
}

fn decode(x: &[Option<f64>], head: HeadKind, rng: &mut ChaCha8Rng) -> HyperparamSet {
    let mut flags = [false; N_GROUPS];
    for (f, v) in flags.iter_mut().zip(x) {
        *f = *v == Some(1.0);
    }
    if !flags.iter().any(|&f| f) {
        flags[rng.gen_range(0..N_GROUPS)] = true;
    }
    let mut i = N_GROUPS + 1;
    let mut next = || {
        let v = x[i];
        i += 1;
        v
    };
    let dropout = next();
    let neurons = std::array::from_fn(|_| next().expect("neurons").round() as usize);
    let activations =
        std::array::from_fn(|_| Activation::ALL[next().expect("activation") as usize]);
    let mut rate = || {
        next();
        next()
    };
    let hidden_l1: [HiddenReg<f64>; HIDDEN_LAYERS] = std::array::from_fn(|_| HiddenReg {
        activity: rate(),
        kernel: rate(),
    });
    let head_l1 = (0..head.params_per_output())
        .map(|_| HeadReg {
            kernel: rate(),
            bias: rate(),
        })
        .collect();
    let learning_rate = x[x.len() - 1].expect("learning rate");
    HyperparamSet {
        feature_mask: FeatureMask(flags),
        dropout,
        neurons,
        activations,
        hidden_l1,
        head_l1,
        learning_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Family;

    fn record(index: usize, params: HyperparamSet, score: f64) -> TrialRecord {
        TrialRecord {
            index,
            params,
            score,
            scored_days: vec![],
            error: None,
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let head = HeadKind::Distributional(Family::Jsu);
        let space = SearchSpace::with_max_neurons(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = layout(&space, head);
        for _ in 0..200 {
            let h = space.sample(head, &mut rng);
            let x = encode(&h);
            assert_eq!(x.len(), dims.len());
            assert_eq!(decode(&x, head, &mut rng), h);
        }
    }

    #[test]
    fn proposals_are_valid_and_seeded() {
        let head = HeadKind::Distributional(Family::Normal);
        let space = SearchSpace::with_max_neurons(32);
        let mut a = TpeSearch::new(space.clone(), head, 7);
        let mut b = TpeSearch::new(space, head, 7);
        let mut history = Vec::new();
        while history.len() < 40 {
            let pa = a.propose(&history, 40 - history.len());
            assert_eq!(pa, b.propose(&history, 40 - history.len()));
            for h in pa {
                h.validate(head).unwrap();
                let score = if history.len() % 9 == 3 {
                    f64::INFINITY
                } else {
                    h.learning_rate.ln().abs()
                };
                history.push(record(history.len(), h, score));
            }
        }
    }

    #[test]
    fn concentrates_on_a_good_region() {
        // score rewards learning rates near 1e-2 and a single feature group
        let head = HeadKind::Point;
        let space = SearchSpace::with_max_neurons(32);
        let score = |h: &HyperparamSet| {
            (h.learning_rate.log10() + 2.0).abs() + if h.feature_mask.0[0] { 0.0 } else { 1.0 }
        };
        let mut tpe = TpeSearch::new(space.clone(), head, 3);
        let mut history = Vec::new();
        while history.len() < 80 {
            for h in tpe.propose(&history, 80 - history.len()) {
                let s = score(&h);
                history.push(record(history.len(), h, s));
            }
        }
        let late: Vec<f64> = history[60..].iter().map(|t| t.score).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random: Vec<f64> = (0..2000)
            .map(|_| score(&space.sample(head, &mut rng)))
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&late) < 0.5 * mean(&random),
            "late {} vs random {}",
            mean(&late),
            mean(&random)
        );
    }
}
