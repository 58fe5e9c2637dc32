use super::{Graph, Tensor, Var};

/// Largest relative error between reverse-mode gradients of `f` and central
/// differences with step `h`, over every entry of every input.
///
/// The relative error uses `max(|analytic|, |numeric|, 1e-6 * s)` as
/// denominator, where `s = max(1, |f|, largest analytic entry)`. Entries with
/// vanishing gradient are then compared absolutely, at a scale above the
/// round-off of the differences themselves.
pub fn gradcheck(
    h: f64,
    inputs: &[Tensor],
    f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars);
    let value = loss.item();
    let grads = g.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let largest = analytic
        .iter()
        .flat_map(|t| t.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * value.abs().max(largest).max(1.0);

    let eval = |ins: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).value().item();
        out
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + h;
            let plus = eval(&probe);
            probe[k].data_mut()[i] = x - h;
            let minus = eval(&probe);
            probe[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
