//! LSTM cells and stacked LSTM layers with backpropagation through time.
//!
//! Gate rows are packed `(input, forget, cell candidate, output)`, each block
//! `hidden` rows tall. The checkpoint format depends on this order.
//!
//! Internally everything runs on row batches: a state is a `[batch × hidden]`
//! matrix and rows can be switched off by a mask, in which case they carry
//! their state through the step unchanged.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{gemm, sigmoid, ParamSet, Parameter, Tensor};

pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    /// `[4h × input]`
    pub w: Parameter,
    /// `[4h × h]`
    pub u: Parameter,
    /// `[4h]`
    pub b: Parameter,
}

impl LstmCellParams {
    pub fn zeros(prefix: &str, input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w: Parameter::new(format!("{prefix}.w"), Tensor::zeros(&[4 * hidden, input])),
            u: Parameter::new(format!("{prefix}.u"), Tensor::zeros(&[4 * hidden, hidden])),
            b: Parameter::new(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden])),
        }
    }

    /// Weights uniform in ±[`INIT_RANGE`], forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(prefix, input, hidden);
        p.w.value = Tensor::uniform(&[4 * hidden, input], -INIT_RANGE, INIT_RANGE, rng);
        p.u.value = Tensor::uniform(&[4 * hidden, hidden], -INIT_RANGE, INIT_RANGE, rng);
        p.b.value.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS_INIT);
        p
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub(crate) fn check_shapes(&self, input: usize, hidden: usize) -> Result<()> {
        let ok = self.w.shape() == [4 * hidden, input]
            && self.u.shape() == [4 * hidden, hidden]
            && self.b.shape() == [4 * hidden];
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "lstm parameters {:?}/{:?}/{:?} do not fit input {input}, hidden {hidden}",
                self.w.shape(),
                self.u.shape(),
                self.b.shape()
            )))
        }
    }
}

impl ParamSet for LstmCellParams {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.u, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

/// Hidden and cell state: `[h]` for one sequence or `[batch × h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros_batch(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

/// What the backward pass of one cell application needs.
#[derive(Clone, Debug)]
pub(crate) struct CellCache {
    batch: usize,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, `[batch × 4h]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    active: Option<Vec<bool>>,
}

/// One cell step over a batch of rows; returns `(h', c', cache)`.
pub(crate) fn cell_forward(
    p: &LstmCellParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
    batch: usize,
    active: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>, CellCache) {
    let hs = p.hidden();
    let xd = p.input_dim();
    let g4 = 4 * hs;
    let mut gates = vec![0.0; batch * g4];
    gemm(batch, xd, g4, x, false, p.w.value.data(), true, 0.0, &mut gates);
    gemm(batch, hs, g4, h, false, p.u.value.data(), true, 1.0, &mut gates);

    let bias = p.b.value.data();
    let mut h_new = vec![0.0; batch * hs];
    let mut c_new = vec![0.0; batch * hs];
    let mut tanh_c = vec![0.0; batch * hs];
    for r in 0..batch {
        let row = &mut gates[r * g4..(r + 1) * g4];
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
        for (k, v) in row.iter_mut().enumerate() {
            *v = if k / hs == 2 { v.tanh() } else { sigmoid(*v) };
        }
        let is_active = active.is_none_or(|a| a[r]);
        for j in 0..hs {
            let idx = r * hs + j;
            if !is_active {
                h_new[idx] = h[idx];
                c_new[idx] = c[idx];
                continue;
            }
            let (i, f, g, o) = (row[j], row[hs + j], row[2 * hs + j], row[3 * hs + j]);
            let cn = f * c[idx] + i * g;
            let tc = cn.tanh();
            c_new[idx] = cn;
            tanh_c[idx] = tc;
            h_new[idx] = o * tc;
        }
    }
    let cache = CellCache {
        batch,
        x: x.to_vec(),
        h_prev: h.to_vec(),
        c_prev: c.to_vec(),
        gates,
        tanh_c,
        active: active.map(<[bool]>::to_vec),
    };
    (h_new, c_new, cache)
}

/// Backward through one cell step. Accumulates parameter gradients and
/// returns `(dx, dh_prev, dc_prev)`.
pub(crate) fn cell_backward(
    p: &mut LstmCellParams,
    cache: &CellCache,
    dh: &[f64],
    dc: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hs = p.hidden();
    let xd = p.input_dim();
    let g4 = 4 * hs;
    let batch = cache.batch;
    let mut dpre = vec![0.0; batch * g4];
    let mut dh_prev = vec![0.0; batch * hs];
    let mut dc_prev = vec![0.0; batch * hs];
    for r in 0..batch {
        let is_active = cache.active.as_ref().is_none_or(|a| a[r]);
        let row = &cache.gates[r * g4..(r + 1) * g4];
        for j in 0..hs {
            let idx = r * hs + j;
            if !is_active {
                dh_prev[idx] = dh[idx];
                dc_prev[idx] = dc[idx];
                continue;
            }
            let (i, f, g, o) = (row[j], row[hs + j], row[2 * hs + j], row[3 * hs + j]);
            let tc = cache.tanh_c[idx];
            let d_o = dh[idx] * tc;
            let dct = dc[idx] + dh[idx] * o * (1.0 - tc * tc);
            let di = dct * g;
            let dg = dct * i;
            let df = dct * cache.c_prev[idx];
            dc_prev[idx] = dct * f;
            let out = &mut dpre[r * g4..(r + 1) * g4];
            out[j] = di * i * (1.0 - i);
            out[hs + j] = df * f * (1.0 - f);
            out[2 * hs + j] = dg * (1.0 - g * g);
            out[3 * hs + j] = d_o * o * (1.0 - o);
        }
    }

    gemm(g4, batch, xd, &dpre, true, &cache.x, false, 1.0, p.w.grad.data_mut());
    gemm(
        g4,
        batch,
        hs,
        &dpre,
        true,
        &cache.h_prev,
        false,
        1.0,
        p.u.grad.data_mut(),
    );
    let db = p.b.grad.data_mut();
    for r in 0..batch {
        for (d, v) in db.iter_mut().zip(&dpre[r * g4..(r + 1) * g4]) {
            *d += v;
        }
    }
    let mut dx = vec![0.0; batch * xd];
    gemm(batch, g4, xd, &dpre, false, p.w.value.data(), false, 0.0, &mut dx);
    gemm(batch, g4, hs, &dpre, false, p.u.value.data(), false, 1.0, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// Caches of one timestep through every layer of a stack.
#[derive(Clone, Debug)]
pub(crate) struct StackStepCache {
    cells: Vec<CellCache>,
}

/// Advances every layer of the stack by one timestep. Layer `k` consumes
/// layer `k-1`'s new hidden state. `states` is updated in place.
pub(crate) fn stack_step(
    layers: &[LstmCellParams],
    x: &[f64],
    states: &mut [LstmState],
    batch: usize,
    active: Option<&[bool]>,
) -> StackStepCache {
    let mut cells = Vec::with_capacity(layers.len());
    let mut input = x.to_vec();
    for (p, st) in layers.iter().zip(states.iter_mut()) {
        let (h, c, cache) = cell_forward(p, &input, st.h.data(), st.c.data(), batch, active);
        st.h.data_mut().copy_from_slice(&h);
        st.c.data_mut().copy_from_slice(&c);
        cells.push(cache);
        input = h;
    }
    StackStepCache { cells }
}

/// Gradient of the loss with respect to each layer's `(h, c)`.
#[derive(Clone, Debug)]
pub(crate) struct StateGrad {
    pub dh: Vec<f64>,
    pub dc: Vec<f64>,
}

impl StateGrad {
    pub fn zeros(len: usize) -> Self {
        StateGrad {
            dh: vec![0.0; len],
            dc: vec![0.0; len],
        }
    }
}

/// Backward through [`stack_step`].
///
/// On entry `grads` holds gradients with respect to the states produced by
/// the step; on return, with respect to the states it started from.
/// `d_top_h` is the extra gradient reaching the top layer's output from
/// outside the recurrence. Returns the gradient for the step's input.
pub(crate) fn stack_step_backward(
    layers: &mut [LstmCellParams],
    cache: &StackStepCache,
    d_top_h: &[f64],
    grads: &mut [StateGrad],
) -> Vec<f64> {
    let mut from_above = d_top_h.to_vec();
    for l in (0..layers.len()).rev() {
        let mut dh = std::mem::take(&mut grads[l].dh);
        for (a, b) in dh.iter_mut().zip(&from_above) {
            *a += b;
        }
        let (dx, dh_prev, dc_prev) = cell_backward(&mut layers[l], &cache.cells[l], &dh, &grads[l].dc);
        grads[l] = StateGrad {
            dh: dh_prev,
            dc: dc_prev,
        };
        from_above = dx;
    }
    from_above
}

fn check_state(state: &LstmState, hidden: usize) -> Result<()> {
    if state.h.shape() != [hidden] || state.c.shape() != [hidden] {
        return Err(Error::dim(format!(
            "state shapes {:?}/{:?} do not match hidden size {hidden}",
            state.h.shape(),
            state.c.shape()
        )));
    }
    Ok(())
}

fn check_input(x: &Tensor, dim: usize) -> Result<()> {
    if x.shape() != [dim] {
        return Err(Error::dim(format!("input shape {:?}, expected [{dim}]", x.shape())));
    }
    Ok(())
}

/// Single LSTM step on one sequence.
pub fn lstm_cell(x: &Tensor, state: &LstmState, params: &LstmCellParams) -> Result<LstmState> {
    let hs = params.hidden();
    check_input(x, params.input_dim())?;
    check_state(state, hs)?;
    let (h, c, _) = cell_forward(params, x.data(), state.h.data(), state.c.data(), 1, None);
    Ok(LstmState {
        h: Tensor::new(&[hs], h)?,
        c: Tensor::new(&[hs], c)?,
    })
}

/// Runs a cell left to right; returns the state after every timestep.
pub fn lstm_layer(inputs: &[Tensor], init: &LstmState, params: &LstmCellParams) -> Result<Vec<LstmState>> {
    let out = stack_layers(inputs, std::slice::from_ref(params), std::slice::from_ref(init))?;
    Ok(out.layer_states.into_iter().next().unwrap())
}

/// Output of [`stack_layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct StackOutput {
    /// Top-layer hidden state per timestep.
    pub outputs: Vec<Tensor>,
    /// Final `(h, c)` of every layer.
    pub finals: Vec<LstmState>,
    /// Every layer's state per timestep, `[layer][t]`.
    pub layer_states: Vec<Vec<LstmState>>,
}

/// Saved forward pass of [`stack_layers_traced`].
#[derive(Clone, Debug)]
pub struct StackTrace {
    steps: Vec<StackStepCache>,
    hidden: Vec<usize>,
}

/// A stack of LSTM layers over one sequence.
pub fn stack_layers(inputs: &[Tensor], layers: &[LstmCellParams], init: &[LstmState]) -> Result<StackOutput> {
    stack_layers_traced(inputs, layers, init).map(|(out, _)| out)
}

pub fn stack_layers_traced(
    inputs: &[Tensor],
    layers: &[LstmCellParams],
    init: &[LstmState],
) -> Result<(StackOutput, StackTrace)> {
    if inputs.is_empty() {
        return Err(Error::dim("empty input sequence"));
    }
    if layers.is_empty() {
        return Err(Error::dim("a stack needs at least one layer"));
    }
    if init.len() != layers.len() {
        return Err(Error::dim(format!(
            "{} initial states for {} layers",
            init.len(),
            layers.len()
        )));
    }
    let mut in_dim = layers[0].input_dim();
    for (p, st) in layers.iter().zip(init) {
        p.check_shapes(in_dim, p.hidden())?;
        check_state(st, p.hidden())?;
        in_dim = p.hidden();
    }
    for x in inputs {
        check_input(x, layers[0].input_dim())?;
    }

    let mut states = init.to_vec();
    let mut steps = Vec::with_capacity(inputs.len());
    let mut layer_states = vec![Vec::with_capacity(inputs.len()); layers.len()];
    for x in inputs {
        steps.push(stack_step(layers, x.data(), &mut states, 1, None));
        for (l, st) in states.iter().enumerate() {
            layer_states[l].push(st.clone());
        }
    }
    let outputs = layer_states.last().unwrap().iter().map(|s| s.h.clone()).collect();
    let trace = StackTrace {
        steps,
        hidden: layers.iter().map(LstmCellParams::hidden).collect(),
    };
    Ok((
        StackOutput {
            outputs,
            finals: states,
            layer_states,
        },
        trace,
    ))
}

/// Gradients flowing out of [`stack_layers_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct StackInputGrads {
    pub inputs: Vec<Tensor>,
    /// Gradient with respect to each layer's initial `(h, c)`.
    pub init: Vec<LstmState>,
}

/// Backpropagation through time for [`stack_layers_traced`].
///
/// `d_outputs[t]` is the gradient of the loss with respect to the top-layer
/// output at `t`; `d_finals` the gradient with respect to each layer's final
/// state. Parameter gradients are accumulated into `layers`.
pub fn stack_layers_backward(
    layers: &mut [LstmCellParams],
    trace: &StackTrace,
    d_outputs: &[Tensor],
    d_finals: &[LstmState],
) -> Result<StackInputGrads> {
    if d_outputs.len() != trace.steps.len() || d_finals.len() != layers.len() {
        return Err(Error::dim("gradient count does not match the traced sequence"));
    }
    let mut grads: Vec<StateGrad> = d_finals
        .iter()
        .map(|s| StateGrad {
            dh: s.h.data().to_vec(),
            dc: s.c.data().to_vec(),
        })
        .collect();
    let mut d_inputs = vec![Tensor::zeros(&[1]); trace.steps.len()];
    for t in (0..trace.steps.len()).rev() {
        let dx = stack_step_backward(layers, &trace.steps[t], d_outputs[t].data(), &mut grads);
        let n = dx.len();
        d_inputs[t] = Tensor::new(&[n], dx)?;
    }
    let init = grads
        .into_iter()
        .zip(&trace.hidden)
        .map(|(g, &h)| -> Result<LstmState> {
            Ok(LstmState {
                h: Tensor::new(&[h], g.dh)?,
                c: Tensor::new(&[h], g.dc)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StackInputGrads { inputs: d_inputs, init })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(&[n], -1.0, 1.0, rng)
    }

    fn scaled_cell(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> LstmCellParams {
        let mut p = LstmCellParams::init("l", input, hidden, rng);
        for q in p.params_mut() {
            q.value.scale(6.0);
        }
        p
    }

    #[test]
    fn zero_params_zero_state() {
        let p = LstmCellParams::zeros("l", 3, 2);
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let s = lstm_cell(&x, &LstmState::zeros(2), &p).unwrap();
        assert_eq!(s.h.data(), &[0.0, 0.0]);
        assert_eq!(s.c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_params_halve_cell() {
        let p = LstmCellParams::zeros("l", 1, 2);
        let c0 = [0.8, -3.0];
        let st = LstmState {
            h: Tensor::vector(vec![0.3, 0.1]).unwrap(),
            c: Tensor::vector(c0.to_vec()).unwrap(),
        };
        let s = lstm_cell(&Tensor::vector(vec![2.0]).unwrap(), &st, &p).unwrap();
        for j in 0..2 {
            assert_eq!(s.c.data()[j], 0.5 * c0[j]);
            assert_eq!(s.h.data()[j], 0.5 * (0.5 * c0[j]).tanh());
        }
    }

    #[test]
    fn init_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmCellParams::init("enc.0", 5, 3, &mut rng);
        assert_eq!(p.w.shape(), &[12, 5]);
        assert_eq!(p.u.shape(), &[12, 3]);
        assert_eq!(p.b.value.data(), &[0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
        assert!(p.w.value.data().iter().all(|v| v.abs() <= INIT_RANGE));
        assert_eq!(p.w.name, "enc.0.w");
    }

    #[test]
    fn shape_errors() {
        let p = LstmCellParams::zeros("l", 3, 2);
        assert!(lstm_cell(&Tensor::zeros(&[2]), &LstmState::zeros(2), &p).is_err());
        assert!(lstm_cell(&Tensor::zeros(&[3]), &LstmState::zeros(3), &p).is_err());
        assert!(lstm_layer(&[], &LstmState::zeros(2), &p).is_err());
        let bad = [LstmCellParams::zeros("a", 3, 2), LstmCellParams::zeros("b", 3, 2)];
        let err = stack_layers(
            &[Tensor::zeros(&[3])],
            &bad,
            &[LstmState::zeros(2), LstmState::zeros(2)],
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn single_step_layer_equals_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = scaled_cell(3, 4, &mut rng);
        let x = rand_vec(3, &mut rng);
        let init = LstmState {
            h: rand_vec(4, &mut rng),
            c: rand_vec(4, &mut rng),
        };
        let states = lstm_layer(std::slice::from_ref(&x), &init, &p).unwrap();
        assert_eq!(states, vec![lstm_cell(&x, &init, &p).unwrap()]);
    }

    #[test]
    fn zero_second_layer_silences_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers = [scaled_cell(2, 3, &mut rng), LstmCellParams::zeros("top", 3, 3)];
        let xs: Vec<Tensor> = (0..4).map(|_| rand_vec(2, &mut rng)).collect();
        let out = stack_layers(&xs, &layers, &[LstmState::zeros(3), LstmState::zeros(3)]).unwrap();
        assert!(out.outputs.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
        assert!(out.layer_states[0].iter().any(|s| s.h.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn one_layer_stack_is_a_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = scaled_cell(2, 2, &mut rng);
        let xs: Vec<Tensor> = (0..3).map(|_| rand_vec(2, &mut rng)).collect();
        let layer = lstm_layer(&xs, &LstmState::zeros(2), &p).unwrap();
        let stack = stack_layers(&xs, std::slice::from_ref(&p), &[LstmState::zeros(2)]).unwrap();
        assert_eq!(stack.layer_states[0], layer);
        assert_eq!(stack.finals[0], *layer.last().unwrap());
    }

    /// Weighted sum of every top output and both parts of every final state,
    /// so all gradient paths are exercised.
    fn stack_loss_check(inputs: usize, hidden: &[usize], len: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut d = inputs;
        for (k, &h) in hidden.iter().enumerate() {
            layers.push(LstmCellParams::init(&format!("l{k}"), d, h, &mut rng));
            for q in layers[k].params_mut() {
                q.value.scale(8.0);
            }
            d = h;
        }
        let xs: Vec<Tensor> = (0..len).map(|_| rand_vec(inputs, &mut rng)).collect();
        let top = *hidden.last().unwrap();
        let out_w: Vec<Tensor> = (0..len).map(|_| rand_vec(top, &mut rng)).collect();
        let fin_w: Vec<LstmState> = hidden
            .iter()
            .map(|&h| LstmState {
                h: rand_vec(h, &mut rng),
                c: rand_vec(h, &mut rng),
            })
            .collect();
        let init: Vec<LstmState> = hidden
            .iter()
            .map(|&h| LstmState {
                h: rand_vec(h, &mut rng),
                c: rand_vec(h, &mut rng),
            })
            .collect();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();

        let report = gradient_check(&mut layers, 1e-5, |layers| {
            let (out, trace) = stack_layers_traced(&xs, layers, &init).unwrap();
            let mut loss = 0.0;
            for (h, w) in out.outputs.iter().zip(&out_w) {
                loss += dot(h, w);
            }
            for (s, w) in out.finals.iter().zip(&fin_w) {
                loss += dot(&s.h, &w.h) + dot(&s.c, &w.c);
            }
            stack_layers_backward(layers, &trace, &out_w, &fin_w).unwrap();
            loss
        });
        report.max_rel_error
    }

    #[test]
    fn cell_gradient_check() {
        assert!(stack_loss_check(3, &[3], 1, 10) < 1e-4);
    }

    #[test]
    fn layer_bptt_gradient_check() {
        assert!(stack_loss_check(2, &[2], 4, 11) < 1e-4);
        assert!(stack_loss_check(3, &[4], 6, 12) < 1e-4);
    }

    #[test]
    fn stacked_bptt_gradient_check() {
        assert!(stack_loss_check(2, &[2, 2], 3, 13) < 1e-4);
        assert!(stack_loss_check(3, &[4, 3], 6, 14) < 1e-4);
    }

    #[test]
    fn input_and_initial_state_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut layers = vec![scaled_cell(2, 3, &mut rng), scaled_cell(3, 2, &mut rng)];
        let xs: Vec<Tensor> = (0..3).map(|_| rand_vec(2, &mut rng)).collect();
        let init = vec![LstmState::zeros(3), LstmState::zeros(2)];
        let w: Vec<Tensor> = (0..3).map(|_| rand_vec(2, &mut rng)).collect();
        let loss = |xs: &[Tensor], layers: &[LstmCellParams]| -> f64 {
            let out = stack_layers(xs, layers, &init).unwrap();
            out.outputs
                .iter()
                .zip(&w)
                .map(|(h, w)| h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (_, trace) = stack_layers_traced(&xs, &layers, &init).unwrap();
        let zero_fin = vec![LstmState::zeros(3), LstmState::zeros(2)];
        let grads = stack_layers_backward(&mut layers, &trace, &w, &zero_fin).unwrap();
        let eps = 1e-5;
        for t in 0..3 {
            for k in 0..2 {
                let mut up = xs.clone();
                up[t].data_mut()[k] += eps;
                let mut down = xs.clone();
                down[t].data_mut()[k] -= eps;
                let numeric = (loss(&up, &layers) - loss(&down, &layers)) / (2.0 * eps);
                let analytic = grads.inputs[t].data()[k];
                assert!(crate::math::relative_error(analytic, numeric) < 1e-4);
            }
        }
    }

    #[test]
    fn masked_rows_carry_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = scaled_cell(2, 3, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (h2, c2, _) = cell_forward(&p, &x, &h, &c, 2, Some(&[true, false]));
        assert_eq!(&h2[3..], &h[3..]);
        assert_eq!(&c2[3..], &c[3..]);
        let (h1, c1, _) = cell_forward(&p, &x[..2], &h[..3], &c[..3], 1, None);
        for j in 0..3 {
            assert!((h1[j] - h2[j]).abs() < 1e-14 && (c1[j] - c2[j]).abs() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bounded_states_and_causality(seed in any::<u64>(), len in 1usize..7, scale in 0.1f64..20.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut p = LstmCellParams::init("l", 3, 4, &mut rng);
                for q in p.params_mut() {
                    q.value.scale(scale);
                }
                let xs: Vec<Tensor> = (0..len).map(|_| Tensor::uniform(&[3], -50.0, 50.0, &mut rng)).collect();
                let init = LstmState { h: Tensor::uniform(&[4], -1.0, 1.0, &mut rng), c: Tensor::uniform(&[4], -5.0, 5.0, &mut rng) };
                let states = lstm_layer(&xs, &init, &p).unwrap();
                let mut prev_c = init.c.clone();
                for s in &states {
                    prop_assert!(s.h.is_finite() && s.c.is_finite());
                    prop_assert!(s.h.data().iter().all(|v| v.abs() <= 1.0));
                    for (c, pc) in s.c.data().iter().zip(prev_c.data()) {
                        prop_assert!(c.abs() <= pc.abs() + 1.0 + 1e-12);
                    }
                    prev_c = s.c.clone();
                }
                let cut = len.div_ceil(2);
                let truncated = lstm_layer(&xs[..cut], &init, &p).unwrap();
                prop_assert_eq!(&states[..cut], &truncated[..]);
            }
        }
    }
}
