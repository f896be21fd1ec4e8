use rand::Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// One scalar entry of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Draws `n` coordinates, uniformly over all parameter entries.
pub fn sample_coordinates(store: &ParamStore, n: usize, rng: &mut impl Rng) -> Vec<Coordinate> {
    let total = store.numel();
    if total == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            for id in store.ids() {
                let len = store.value(id).numel();
                if flat < len {
                    return Coordinate { param: id, index: flat };
                }
                flat -= len;
            }
            unreachable!("flat index within total")
        })
        .collect()
}

fn eval_loss(store: &ParamStore, f: &mut impl FnMut(&Graph, &ParamStore) -> Result<Var>) -> Result<f64> {
    let g = Graph::new();
    let loss = f(&g, store)?;
    g.value(loss)
        .item()
        .ok_or_else(|| Error::Usage("gradcheck objective must be scalar".into()))
}

/// Compares reverse-mode gradients with central differences.
///
/// `f` builds a scalar loss on the graph it is handed. The autodiff pass
/// runs on `make_graph()` so callers can inject faulty backward rules. The
/// error per coordinate is `|g_auto − g_fd| / max(1, |g_auto|, |g_fd|)`.
pub fn finite_difference_gradcheck(
    store: &mut ParamStore,
    mut f: impl FnMut(&Graph, &ParamStore) -> Result<Var>,
    make_graph: impl Fn() -> Graph,
    coords: &[Coordinate],
    eps: f64,
) -> Result<GradcheckReport> {
    if eps <= 0.0 {
        return Err(Error::Usage(format!("gradcheck eps must be positive, got {eps}")));
    }
    store.zero_grads();
    let g = make_graph();
    let loss = f(&g, store)?;
    g.backward(loss, store)?;
    drop(g);

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for c in coords {
        let auto = store.get(c.param).grad.data()[c.index];
        let orig = store.value(c.param).data()[c.index];
        store.get_mut(c.param).value.data_mut()[c.index] = orig + eps;
        let plus = eval_loss(store, &mut f)?;
        store.get_mut(c.param).value.data_mut()[c.index] = orig - eps;
        let minus = eval_loss(store, &mut f)?;
        store.get_mut(c.param).value.data_mut()[c.index] = orig;

        let fd = (plus - minus) / (2.0 * eps);
        let rel = (auto - fd).abs() / 1f64.max(auto.abs()).max(fd.abs());
        report.checked += 1;
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((store.get(c.param).name.clone(), c.index));
        }
    }
    store.zero_grads();
    Ok(report)
}
