use rand::Rng;

use super::{Parameterized, Tensor2};

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_error: f64,
}

/// Compare `analytic` against central finite differences of `loss` at
/// `probes` parameter entries drawn uniformly over all parameters.
pub fn check_gradients<M, F>(
    model: &M,
    analytic: &[Tensor2],
    loss: F,
    probes: usize,
    h: f64,
    rng: &mut impl Rng,
) -> GradCheck
where
    M: Parameterized + Clone,
    F: Fn(&M) -> f64,
{
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    assert_eq!(sizes.len(), analytic.len(), "gradient list does not match parameters");
    let total: usize = sizes.iter().sum();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let original = model.params()[tensor].as_slice().expect("standard layout")[flat];
        let set = |m: &mut M, v: f64| {
            m.params_mut()[tensor].as_slice_mut().expect("standard layout")[flat] = v;
        };
        set(&mut probe, original + h);
        let up = loss(&probe);
        set(&mut probe, original - h);
        let down = loss(&probe);
        set(&mut probe, original);
        let numeric = (up - down) / (2.0 * h);
        let exact = analytic[tensor].as_slice().expect("standard layout")[flat];
        worst = worst.max(relative_error(exact, numeric));
    }
    GradCheck {
        probes,
        max_rel_error: worst,
    }
}
