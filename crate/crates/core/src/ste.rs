//! Clip-then-round, the one non-differentiable primitive shared by the weight
//! quantizer and the IE-LIF neuron.
//!
//! Backward passes treat rounding as identity inside the clip range and as a
//! constant outside it. To check those gradients against finite differences,
//! a forward pass can be *recorded* and then *replayed*: on replay every site
//! keeps the clip decision and rounding residual of the recorded pass, so the
//! replayed function is smooth in its inputs and its exact derivative is the
//! straight-through gradient.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Below,
    Inside,
    Above,
}

#[derive(Clone, Debug)]
struct Site<T> {
    region: Vec<Region>,
    residual: Vec<T>,
}

#[derive(Clone, Debug, Default)]
enum Phase {
    #[default]
    Exact,
    Record,
    Replay(usize),
}

#[derive(Clone, Debug, Default)]
pub struct ClipRound<T> {
    phase: Phase,
    tape: Vec<Site<T>>,
    margin: Option<T>,
}

impl<T: Real> ClipRound<T> {
    /// Plain `round(clip(x))`, nothing stored.
    pub fn exact() -> Self {
        Self {
            phase: Phase::Exact,
            tape: Vec::new(),
            margin: None,
        }
    }

    pub fn recording() -> Self {
        Self {
            phase: Phase::Record,
            tape: Vec::new(),
            margin: None,
        }
    }

    /// Rewind a recorded tape so the next forward pass replays it.
    pub fn rewind(&mut self) {
        self.phase = Phase::Replay(0);
    }

    pub fn sites(&self) -> usize {
        self.tape.len()
    }

    /// Smallest distance between a recorded in-range value and a clip bound.
    pub fn min_clip_margin(&self) -> T {
        self.margin.unwrap_or(T::infinity())
    }

    /// `xs <- round_half_even(clip(xs, lo, hi))`, subject to the current phase.
    pub fn apply(&mut self, xs: &mut [T], lo: T, hi: T) {
        match &mut self.phase {
            Phase::Exact => {
                for x in xs.iter_mut() {
                    *x = x.max(lo).min(hi).round_even();
                }
            }
            Phase::Record => {
                let mut site = Site {
                    region: Vec::with_capacity(xs.len()),
                    residual: Vec::with_capacity(xs.len()),
                };
                for x in xs.iter_mut() {
                    let (region, r) = if *x <= lo {
                        (Region::Below, T::zero())
                    } else if *x >= hi {
                        (Region::Above, T::zero())
                    } else {
                        let m = (*x - lo).min(hi - *x);
                        self.margin = Some(self.margin.map_or(m, |old| old.min(m)));
                        (Region::Inside, x.round_even() - *x)
                    };
                    site.region.push(region);
                    site.residual.push(r);
                    *x = x.max(lo).min(hi).round_even();
                }
                self.tape.push(site);
            }
            Phase::Replay(cursor) => {
                let site = self
                    .tape
                    .get(*cursor)
                    .expect("replayed pass has more rounding sites than the recording");
                assert_eq!(site.region.len(), xs.len(), "replay site size changed");
                for ((x, &region), &r) in xs.iter_mut().zip(&site.region).zip(&site.residual) {
                    *x = match region {
                        Region::Below => lo,
                        Region::Above => hi,
                        Region::Inside => *x + r,
                    };
                }
                *cursor += 1;
            }
        }
    }
}

/// Straight-through mask: true strictly inside the clip range.
#[inline]
pub fn inside<T: Real>(x: T, lo: T, hi: T) -> bool {
    x > lo && x < hi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_rounds_and_clips() {
        let mut c = ClipRound::<f64>::exact();
        let mut xs = [-3.0, 0.4, 0.5, 1.5, 2.49, 9.0];
        c.apply(&mut xs, -2.0, 3.0);
        assert_eq!(xs, [-2.0, 0.0, 0.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn replay_is_linear_inside_and_frozen_outside() {
        let mut c = ClipRound::<f64>::recording();
        let mut xs = [0.3, 5.0, -1.0];
        c.apply(&mut xs, 0.0, 4.0);
        assert_eq!(xs, [0.0, 4.0, 0.0]);
        c.rewind();
        let mut ys = [0.35, 5.5, -0.5];
        c.apply(&mut ys, 0.0, 4.0);
        assert!((ys[0] - 0.05).abs() < 1e-12);
        assert_eq!(&ys[1..], &[4.0, 0.0]);
    }
}
