use rand::seq::index::sample;

use super::{seeded_rng, NumError, ParamStore, Tape, Var};

/// Settings for [`grad_check`].
///
/// The relative error of one component is `|a − n| / max(|a|, |n|, floor)`,
/// where `a` is the backward gradient and `n` the central difference. The
/// floor keeps components whose true gradient is ~0 from reporting
/// meaningless ratios.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Upper bound on checked components per parameter; sampled when larger.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-6,
            floor: 1e-3,
            max_samples: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, parameter by parameter.
///
/// `f` must be pure: it is re-run on perturbed copies of `store`. Anything
/// stochastic (dropout) has to be disabled by the caller.
pub fn grad_check<F, E>(store: &ParamStore, f: F, cfg: GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var, E>,
    E: From<NumError>,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = seeded_rng(cfg.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let idx: Vec<usize> = if n <= cfg.max_samples {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.max_samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &idx {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - cfg.h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            checked: idx.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < cfg.tol,
        });
    }
    Ok(GradCheckReport { params })
}
