use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Tensor};

/// Tensors with at least this many elements are checked on a sample.
const SAMPLE_THRESHOLD: usize = 200;
const SAMPLE_SIZE: usize = 64;
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked elements of `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter and element index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and finite-difference gradient at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Elements whose perturbation moved some ReLU input across zero; their
    /// finite difference measures a kink, not the gradient.
    pub skipped_kinks: usize,
}

/// Compares tape gradients of `sum(program output)` against central finite
/// differences for every parameter of `store`.
///
/// `program` is re-run on a fresh tape with the same `mode` and dropout
/// `seed` for every perturbation. Tensors of 200 or more elements are
/// checked on 64 seeded random elements. Elements whose `±epsilon` passes
/// change the ReLU sign pattern are counted in `skipped_kinks` instead.
pub fn grad_check<F>(
    store: &ParamStore,
    mode: Mode,
    seed: u64,
    epsilon: f64,
    program: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new(store, mode, seed);
    let out = program(&mut tape)?;
    let seed_tensor = Tensor::ones(tape.value_of(out).shape());
    let analytic = tape.backward(out, &seed_tensor)?;
    let base_pattern = tape.relu_pattern();

    let objective = |s: &ParamStore| -> Result<(f64, bool)> {
        let mut t = Tape::new(s, mode, seed);
        let o = program(&mut t)?;
        Ok((t.value_of(o).sum(), t.relu_pattern() == base_pattern))
    };

    let mut sampler = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
        skipped_kinks: 0,
    };
    let names: Vec<String> = store.param_names().map(str::to_string).collect();
    for name in names {
        let len = store.param(&name)?.len();
        let indices: Vec<usize> = if len >= SAMPLE_THRESHOLD {
            sample(&mut sampler, len, SAMPLE_SIZE).into_vec()
        } else {
            (0..len).collect()
        };
        for i in indices {
            let original = store.param(&name)?.data()[i];
            probe.param_mut(&name)?.data_mut()[i] = original + epsilon;
            let (plus, plus_smooth) = objective(&probe)?;
            probe.param_mut(&name)?.data_mut()[i] = original - epsilon;
            let (minus, minus_smooth) = objective(&probe)?;
            probe.param_mut(&name)?.data_mut()[i] = original;
            if !(plus_smooth && minus_smooth) {
                report.skipped_kinks += 1;
                continue;
            }

            let fd = (plus - minus) / (2.0 * epsilon);
            let ad = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_values = (ad, fd);
            }
        }
    }
    Ok(report)
}
