use rand::seq::index::sample;

use crate::error::Result;
use crate::rng::{rng_for, stream};

use super::{ParamStore, Tape, Value};

/// Step of the one-sided kink probe.
pub const FD_STEP: f64 = 1e-6;
/// Base step of the extrapolated central difference.
pub const RICHARDSON_STEP: f64 = 1e-4;
const SAMPLE_FRACTION: f64 = 0.05;
const MIN_SAMPLES: usize = 50;
const REL_FLOOR: f64 = 1e-8;
/// The extrapolated difference carries roundoff near `(5/3)·ε·|f|/h ≈ 4e-12·|f|`;
/// smaller components are compared against `1e-7·max(1, |f|)` instead.
const NOISE_FLOOR: f64 = 1e-7;
/// One-sided slopes further apart than this flag a kink.
const KINK_REL: f64 = 1e-2;
const KINK_ABS: f64 = 1e-6;
/// About four times the roundoff of the narrow central difference, per unit loss.
const STENCIL_ABS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Components excluded because the loss has a kink there.
    pub skipped: usize,
    pub pass: bool,
    pub worst: Option<ComponentReport>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar returned by `forward`
/// against extrapolated central finite differences on a seeded sample of parameter
/// entries (5%, at least 50, at most all).
pub fn grad_check<F>(store: &mut ParamStore, mut forward: F, tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Value>,
{
    store.zero_grads();
    let f0 = {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, store)?;
        tape.backward_into(loss, store)?;
        tape.value(loss).get(0, 0)
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, store)?;
        Ok(tape.value(loss).get(0, 0))
    };

    let noise_floor = REL_FLOOR.max(NOISE_FLOOR * f0.abs().max(1.0));
    let sizes: Vec<usize> = store.iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let want = ((total as f64 * SAMPLE_FRACTION).ceil() as usize).max(MIN_SAMPLES).min(total);
    let mut rng = rng_for(seed, &[stream::GRADCHECK]);
    let mut picks = sample(&mut rng, total, want).into_vec();
    picks.sort_unstable();

    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0, pass: false, worst: None };
    for flat in picks {
        let (mut p, mut k) = (0, flat);
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let id = ids[p];
        let analytic = store.grad(id).as_slice()[k];
        let orig = store.value(id).as_slice()[k];
        let mut central = |h: f64| -> Result<(f64, f64, f64)> {
            // divide by the steps actually representable around `orig`
            let (up, down) = (orig + h, orig - h);
            let (hp, hm) = (up - orig, orig - down);
            store.value_mut(id).as_mut_slice()[k] = up;
            let fp = eval(store)?;
            store.value_mut(id).as_mut_slice()[k] = down;
            let fm = eval(store)?;
            store.value_mut(id).as_mut_slice()[k] = orig;
            Ok(((fp - f0) / hp, (f0 - fm) / hm, (fp - fm) / (hp + hm)))
        };
        let kinked = |a: f64, b: f64| (a - b).abs() > KINK_REL * a.abs().max(b.abs()) + KINK_ABS;

        let (fwd, bwd, near) = central(FD_STEP)?;
        if kinked(fwd, bwd) {
            report.skipped += 1;
            continue;
        }
        // Richardson: (4·D(h) − D(2h))/3 cancels the h² term; the larger
        // step cuts roundoff about a hundredfold against D(1e-6)
        let (_, _, d1) = central(RICHARDSON_STEP)?;
        let (_, _, d2) = central(2.0 * RICHARDSON_STEP)?;
        let numeric = (4.0 * d1 - d2) / 3.0;
        // On smooth stretches both estimates agree to roundoff of the narrow
        // one; a kink inside the wide stencil shows up as disagreement.
        let stencil_gap = (numeric - near).abs();
        if stencil_gap > 0.1 * tolerance * numeric.abs().max(near.abs()) + STENCIL_ABS * f0.abs().max(1.0) {
            report.skipped += 1;
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(noise_floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(ComponentReport {
                param: store.get(id).name.clone(),
                index: k,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }
    report.pass = report.checked > 0 && report.max_rel_err <= tolerance;
    Ok(report)
}
