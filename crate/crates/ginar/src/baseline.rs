//! Stand-in forecasters for the comparative experiments.
//!
//! Both baselines are deliberately simple two-layer perceptrons applied
//! per variable with shared weights. [`MlpBaseline`] consumes the zero-filled
//! inputs as they are, so a masked variable's forecast can never draw on the
//! variables that still report; it is the reference point for what
//! missing-blind forecasting achieves. [`IaMlpBaseline`] puts interpolation
//! attention in front of the same perceptron and trains the whole thing end
//! to end, isolating the value of recovery from the value of the full
//! recurrent model.

use crate::data::WindowBatch;
use crate::ia::{apply_ia, IaError, InterpolationAttention};
use crate::model::{split_time, ModelError};
use crate::params::ParamRegistry;
use crate::tensor::{real, Real, Tape, Tensor, TensorError};
use crate::train::Forecaster;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One shared two-layer MLP over each variable's flattened history:
/// `(B, N, H*C) -> hidden -> L`.
#[derive(Debug, Clone, Copy)]
pub struct MlpBaseline {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpBaseline {
    pub fn init<F: Real, R: Rng>(
        tape: &mut Tape<F>,
        params: &mut ParamRegistry,
        rng: &mut R,
        history: usize,
        channels: usize,
        hidden: usize,
        horizon: usize,
    ) -> Result<MlpBaseline, TensorError> {
        let input = history * channels;
        let bound_in = 1.0 / (input.max(1) as f64).sqrt();
        let bound_hidden = 1.0 / (hidden.max(1) as f64).sqrt();
        Ok(MlpBaseline {
            w1: params.uniform(tape, rng, "mlp.w1", &[input, hidden], bound_in)?,
            b1: params.constant(tape, "mlp.b1", &[hidden], 0.0)?,
            w2: params.uniform(tape, rng, "mlp.w2", &[hidden, horizon], bound_hidden)?,
            b2: params.constant(tape, "mlp.b2", &[horizon], 0.0)?,
        })
    }
}

/// `relu(x W1 + b1) W2 + b2` on the trailing axis.
fn mlp_apply<F: Real>(
    tape: &mut Tape<F>,
    x: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
) -> Result<Tensor, TensorError> {
    let z1 = tape.matmul(x, w1)?;
    let z1 = tape.add(z1, b1)?;
    let h = tape.relu(z1)?;
    let z2 = tape.matmul(h, w2)?;
    tape.add(z2, b2)
}

impl<F: Real> Forecaster<F> for MlpBaseline {
    fn forward(
        &self,
        tape: &mut Tape<F>,
        batch: &WindowBatch,
        _dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let data: Vec<F> = batch.x.iter().map(|&v| real(v)).collect();
        let x = tape.leaf(
            &[batch.batch, batch.n_vars, batch.history * batch.channels],
            data,
        )?;
        Ok(mlp_apply(tape, x, self.w1, self.b1, self.w2, self.b2)?)
    }
}

/// Interpolation attention feeding the shared per-variable MLP, end to end:
/// every history step is recovered to `features` channels, the recovered
/// steps are concatenated, and the MLP maps them to the horizons.
#[derive(Debug, Clone, Copy)]
pub struct IaMlpBaseline {
    pub ia: InterpolationAttention,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl IaMlpBaseline {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Real, R: Rng>(
        tape: &mut Tape<F>,
        params: &mut ParamRegistry,
        rng: &mut R,
        n_vars: usize,
        history: usize,
        channels: usize,
        features: usize,
        embed_dim: usize,
        neighbor_k: usize,
        hidden: usize,
        horizon: usize,
    ) -> Result<IaMlpBaseline, IaError> {
        let ia = InterpolationAttention::init(
            tape,
            params,
            rng,
            "iamlp.ia",
            n_vars,
            channels,
            features,
            embed_dim,
            neighbor_k,
            false,
        )?;
        let input = history * features;
        let bound_in = 1.0 / (input.max(1) as f64).sqrt();
        let bound_hidden = 1.0 / (hidden.max(1) as f64).sqrt();
        Ok(IaMlpBaseline {
            ia,
            w1: params.uniform(tape, rng, "iamlp.w1", &[input, hidden], bound_in)?,
            b1: params.constant(tape, "iamlp.b1", &[hidden], 0.0)?,
            w2: params.uniform(tape, rng, "iamlp.w2", &[hidden, horizon], bound_hidden)?,
            b2: params.constant(tape, "iamlp.b2", &[horizon], 0.0)?,
        })
    }
}

impl<F: Real> Forecaster<F> for IaMlpBaseline {
    fn forward(
        &self,
        tape: &mut Tape<F>,
        batch: &WindowBatch,
        _dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let steps = split_time(tape, batch)?;
        let mut recovered = Vec::with_capacity(steps.len());
        for step in steps {
            recovered.push(apply_ia(tape, &self.ia, step, &batch.mask)?);
        }
        let axis = tape.shape(recovered[0]).len() - 1;
        let cat = tape.concat(&recovered, axis)?;
        Ok(mlp_apply(tape, cat, self.w1, self.b1, self.w2, self.b2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(batch: usize, n: usize, h: usize, l: usize, seed: u64) -> WindowBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WindowBatch {
            batch,
            n_vars: n,
            history: h,
            channels: 1,
            horizon: l,
            x: (0..batch * n * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            y: (0..batch * n * l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mask: Vec::new(),
        }
    }

    fn toy_mlp(tape: &mut Tape<f64>, h: usize, hidden: usize, l: usize, seed: u64) -> MlpBaseline {
        let mut params = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpBaseline::init(tape, &mut params, &mut rng, h, 1, hidden, l).unwrap()
    }

    #[test]
    fn mlp_matches_a_scalar_oracle() {
        let mut tape = Tape::<f64>::new();
        let (h, hidden, l) = (3, 4, 2);
        let mlp = toy_mlp(&mut tape, h, hidden, l, 1);
        let batch = toy_batch(2, 3, h, l, 2);
        let out = mlp.forward(&mut tape, &batch, None).unwrap();
        assert_eq!(tape.shape(out), &[2, 3, l]);

        let w1 = tape.data(mlp.w1).to_vec();
        let b1 = tape.data(mlp.b1).to_vec();
        let w2 = tape.data(mlp.w2).to_vec();
        let b2 = tape.data(mlp.b2).to_vec();
        for bi in 0..2 {
            for ni in 0..3 {
                let row = &batch.x[(bi * 3 + ni) * h..(bi * 3 + ni + 1) * h];
                let mut hid = vec![0.0; hidden];
                for (j, hv) in hid.iter_mut().enumerate() {
                    let mut z = b1[j];
                    for (i, &xv) in row.iter().enumerate() {
                        z += xv * w1[i * hidden + j];
                    }
                    *hv = z.max(0.0);
                }
                for o in 0..l {
                    let mut z = b2[o];
                    for (j, &hv) in hid.iter().enumerate() {
                        z += hv * w2[j * l + o];
                    }
                    let got = tape.data(out)[(bi * 3 + ni) * l + o];
                    assert!((got - z).abs() < 1e-12, "({bi},{ni},{o}): {got} vs {z}");
                }
            }
        }
    }

    #[test]
    fn mlp_treats_variables_independently() {
        let mut tape = Tape::<f64>::new();
        let mlp = toy_mlp(&mut tape, 4, 5, 3, 3);
        let base = toy_batch(1, 4, 4, 3, 4);
        let out_a = mlp.forward(&mut tape, &base, None).unwrap();
        // Changing variable 2's history must not move any other variable's
        // forecast, and must move variable 2's.
        let mut bumped = base.clone();
        for v in &mut bumped.x[2 * 4..3 * 4] {
            *v += 0.5;
        }
        let out_b = mlp.forward(&mut tape, &bumped, None).unwrap();
        let a = tape.data(out_a);
        let b = tape.data(out_b);
        assert_eq!(&a[0..6], &b[0..6]);
        assert_ne!(&a[6..9], &b[6..9]);
        assert_eq!(&a[9..12], &b[9..12]);
    }

    #[test]
    fn ia_mlp_recovers_masked_variables_from_neighbors() {
        let mut tape = Tape::<f64>::new();
        let mut params = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, h, l) = (4, 3, 2);
        let ia_mlp = IaMlpBaseline::init(
            &mut tape, &mut params, &mut rng, n, h, 1, 3, 4, n - 1, 6, l,
        )
        .unwrap();
        let mut batch = toy_batch(1, n, h, l, 6);
        batch.mask = vec![1];
        let out_a = ia_mlp.forward(&mut tape, &batch, None).unwrap();
        // Perturbing a normal variable moves the masked variable's forecast:
        // variable 1's prediction is built from its neighbors.
        let mut bumped = batch.clone();
        for v in &mut bumped.x[0..h] {
            *v += 0.25;
        }
        let out_b = ia_mlp.forward(&mut tape, &bumped, None).unwrap();
        let masked_a = &tape.data(out_a)[l..2 * l];
        let masked_b = &tape.data(out_b)[l..2 * l];
        assert_ne!(masked_a, masked_b);
        // The masked variable's own (zeroed) input row carries no signal, so
        // editing it changes nothing anywhere.
        let mut edited = batch.clone();
        for v in &mut edited.x[h..2 * h] {
            *v = 9.0;
        }
        let out_c = ia_mlp.forward(&mut tape, &edited, None).unwrap();
        assert_eq!(tape.data(out_a), tape.data(out_c));
    }

    #[test]
    fn ia_mlp_gradients_match_finite_differences() {
        use crate::tensor::grad_check;

        let (n, h, l, feats, d, hidden) = (3, 2, 2, 2, 2, 3);
        let mut probe_tape = Tape::<f64>::new();
        let mut probe_params = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        IaMlpBaseline::init(
            &mut probe_tape, &mut probe_params, &mut rng, n, h, 1, feats, d, n - 1, hidden, l,
        )
        .unwrap();
        let inits: Vec<crate::tensor::ParamInit> = probe_params
            .entries()
            .iter()
            .map(|(name, t)| {
                crate::tensor::ParamInit::new(
                    name,
                    probe_tape.shape(*t),
                    probe_tape.data(*t).to_vec(),
                )
            })
            .collect();
        let batch = {
            let mut b = toy_batch(2, n, h, l, 10);
            b.mask = vec![0];
            b
        };

        let report = grad_check(&inits, 1e-5, 1e-4, |tape, handles| {
            // Rebuild the baseline around the probe's parameter handles.
            let ia = InterpolationAttention {
                source_embedding: handles[0],
                target_embedding: handles[1],
                feature_proj: handles[2],
                score_weight: handles[3],
                score_bias: handles[4],
                pair_weight: None,
                k: n - 1,
                pairwise: false,
            };
            let model = IaMlpBaseline {
                ia,
                w1: handles[5],
                b1: handles[6],
                w2: handles[7],
                b2: handles[8],
            };
            let out = model
                .forward(tape, &batch, None)
                .map_err(|e| TensorError::Invalid {
                    op: "forward",
                    msg: e.to_string(),
                })?;
            let sq = tape.mul(out, out)?;
            tape.mean_all(sq)
        })
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} on {}",
            report.max_rel_err,
            report.worst_param()
        );
    }

    #[test]
    fn baselines_train_under_the_shared_loop() {
        use crate::data::{self, PipelineOptions};
        use crate::train::{evaluate, fit, TrainConfig, TrainData};

        let (ds, _) = data::synth_generate(4, 240, 3, 0.05).unwrap();
        let mask = data::gen_mask(4, 0.25, 2).unwrap();
        let prep = data::prepare(&ds, &mask, &PipelineOptions::default()).unwrap();
        let data = TrainData::from_prepared(&prep);
        let mut tape = Tape::<f64>::new();
        let mut params = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mlp = MlpBaseline::init(&mut tape, &mut params, &mut rng, 12, 1, 16, 12).unwrap();
        let initial = evaluate(&mut tape, &mlp, &data.val, &data.scale, &data.shift, 32).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 8,
            ..TrainConfig::default()
        };
        let fitres = fit(&mut tape, &mlp, &params, &data, &cfg).unwrap();
        assert!(fitres.best_val.unwrap().mae < initial.mae);
    }
}
