use super::{Array, ParamStore, Tape, Var};
use crate::Result;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over coordinates of `|analytic - central difference| / max(1, |cd|)`
/// for a scalar function of one input array.
pub fn grad_check<F>(f: F, x: &Array<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: Array<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(x);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut t = Tape::new();
    let v = t.input(x.clone());
    let out = f(&mut t, v)?;
    let grads = t.backward(out)?;
    let zeros = Array::zeros(x.shape().to_vec());
    let analytic = grads.wrt(v).unwrap_or(&zeros);
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let mut xm = x.clone();
        xm.data_mut()[k] -= h;
        let numeric = (eval(xp)? - eval(xm)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[k], numeric));
    }
    Ok(worst)
}

/// Same check over parameter entries of a store. At most `max_per_param`
/// entries of each parameter are probed (evenly spaced), to keep large
/// models affordable.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, h: f64, max_per_param: usize) -> Result<f64>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference(s);
        let out = f(&mut t)?;
        Ok(t.value(out).item())
    };
    let mut t = Tape::with_params(store);
    let out = f(&mut t)?;
    let grads = t.backward(out)?;
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        let len = store.get(id).len();
        let step = (len / max_per_param.max(1)).max(1);
        for k in (0..len).step_by(step) {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(grads.param(id).data()[k], numeric));
        }
    }
    Ok(worst)
}
