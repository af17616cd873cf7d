//! LSTM cell composed from graph primitives, so its gradients come from
//! the same backward pass as everything else.

use super::{Graph, NodeId, ParamId, ParamSet, TensorResult};

/// Parameter ids of one LSTM layer. Gate layout along the 4H axis is
/// (input, forget, candidate, output).
#[derive(Debug, Clone, Copy)]
pub struct LstmLayerIds {
    /// [input_dim, 4*hidden]
    pub w_ih: ParamId,
    /// [hidden, 4*hidden]
    pub w_hh: ParamId,
    /// [4*hidden]
    pub bias: ParamId,
}

/// Standard LSTM recurrence on a [1, input_dim] row vector.
///
/// gates = x.W_ih + h.W_hh + b; i,f = sigmoid, g = tanh, o = sigmoid;
/// c' = f*c + i*g; h' = o*tanh(c').
pub fn lstm_cell(
    graph: &mut Graph,
    params: &ParamSet,
    ids: &LstmLayerIds,
    hidden: usize,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> TensorResult<(NodeId, NodeId)> {
    let w_ih = graph.param(params, ids.w_ih);
    let w_hh = graph.param(params, ids.w_hh);
    let bias = graph.param(params, ids.bias);

    let xg = graph.matmul(x, w_ih)?;
    let hg = graph.matmul(h_prev, w_hh)?;
    let pre = graph.add(xg, hg)?;
    let gates = graph.add(pre, bias)?;

    let i_pre = graph.slice_cols(gates, 0, hidden)?;
    let f_pre = graph.slice_cols(gates, hidden, hidden)?;
    let g_pre = graph.slice_cols(gates, 2 * hidden, hidden)?;
    let o_pre = graph.slice_cols(gates, 3 * hidden, hidden)?;

    let i = graph.sigmoid(i_pre)?;
    let f = graph.sigmoid(f_pre)?;
    let g = graph.tanh(g_pre)?;
    let o = graph.sigmoid(o_pre)?;

    let fc = graph.mul(f, c_prev)?;
    let ig = graph.mul(i, g)?;
    let c = graph.add(fc, ig)?;
    let tanh_c = graph.tanh(c)?;
    let h = graph.mul(o, tanh_c)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn layer(params: &mut ParamSet, input: usize, hidden: usize, prefix: &str) -> LstmLayerIds {
        LstmLayerIds {
            w_ih: params.register(&format!("{prefix}.w_ih"), Tensor::zeros(vec![input, 4 * hidden])),
            w_hh: params.register(&format!("{prefix}.w_hh"), Tensor::zeros(vec![hidden, 4 * hidden])),
            bias: params.register(&format!("{prefix}.bias"), Tensor::zeros(vec![4 * hidden])),
        }
    }

    #[test]
    fn zero_params_zero_state_gives_zero_h() {
        // All gates sigma(0)=0.5, candidate tanh(0)=0:
        // c = 0.5*c_prev + 0.5*0 = 0, h = 0.5*tanh(0) = 0.
        let mut params = ParamSet::new();
        let ids = layer(&mut params, 3, 4, "l0");
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.7, -2.0, 5.0]));
        let h0 = g.constant(Tensor::zeros(vec![1, 4]));
        let c0 = g.constant(Tensor::zeros(vec![1, 4]));
        let (h, c) = lstm_cell(&mut g, &params, &ids, 4, x, h0, c0).unwrap();
        assert!(g.value(h).data().iter().all(|v| *v == 0.0));
        assert!(g.value(c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_params_carry_half_of_c_prev() {
        let mut params = ParamSet::new();
        let ids = layer(&mut params, 2, 3, "l0");
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let h0 = g.constant(Tensor::zeros(vec![1, 3]));
        let c0 = g.constant(Tensor::new(vec![1, 3], vec![0.4, -0.8, 1.2]));
        let (h, c) = lstm_cell(&mut g, &params, &ids, 3, x, h0, c0).unwrap();
        for (j, &cv) in g.value(c).data().iter().enumerate() {
            let expected_c = 0.5 * [0.4, -0.8, 1.2][j];
            assert!((cv - expected_c).abs() < 1e-15);
            let expected_h = 0.5 * expected_c.tanh();
            assert!((g.value(h).data()[j] - expected_h).abs() < 1e-15);
        }
    }

    #[test]
    fn forget_bias_with_zero_state_keeps_c_zero() {
        // c = sigma(10)*0 + sigma(0)*tanh(0) = 0
        let mut params = ParamSet::new();
        let ids = layer(&mut params, 2, 2, "l0");
        params.get_mut(ids.bias).data_mut()[2] = 10.0; // forget gate slots are [h, 2h)
        params.get_mut(ids.bias).data_mut()[3] = 10.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, -1.0]));
        let h0 = g.constant(Tensor::zeros(vec![1, 2]));
        let c0 = g.constant(Tensor::zeros(vec![1, 2]));
        let (_, c) = lstm_cell(&mut g, &params, &ids, 2, x, h0, c0).unwrap();
        assert!(g.value(c).data().iter().all(|v| v.abs() < 1e-15));
    }
}
