//! Exhaustive gradient checking of the full pipeline.
//!
//! Builds the complete fusion model at the reduced dimensions configured in
//! `RunConfig::gradcheck`, runs one training-mode forward/backward of the
//! CCC loss over a small synthetic batch, and compares every parameter's
//! tape gradient against central finite differences. Results are grouped by
//! layer so a defective backward rule is immediately attributable. The loss
//! itself gets its own row: the analytic closed-form gradient against finite
//! differences of the metric.
//!
//! Dropout is disabled (a stochastic mask would change between the two
//! finite-difference evaluations); batch normalization runs in training
//! mode, so its batch-statistics path is fully covered.

use crate::check::{central_diff, max_rel_err, rel_err, FD_STEP};
use crate::config::RunConfig;
use crate::ctx::Ctx;
use crate::data::{synth_corpus, FeatureBundle, SignalSpec, StreamWidths, Target};
use crate::error::Result;
use crate::head::{ccc, ccc_loss_grad, ccc_loss_on_tape};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerReport {
    pub layer: String,
    pub params_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub layers: Vec<LayerReport>,
    pub max_rel_err: f64,
}

/// Layer group of a parameter name.
pub fn layer_of(name: &str) -> &'static str {
    if name.starts_with("enc/") {
        "lstm_encoder"
    } else if name.starts_with("backbone/") {
        "gru_backbone"
    } else if name.starts_with("ttf/") {
        "ttf_refine"
    } else if name.starts_with("edge/avcr/") {
        "avcr_attention"
    } else if name.starts_with("edge/avvr/") {
        "avvr_attention"
    } else if name.starts_with("edge/") {
        "edge_fc"
    } else if name.starts_with("gcn/") {
        "edge_gcn"
    } else if name.starts_with("head/") {
        "readout_head"
    } else {
        "other"
    }
}

fn gradcheck_config(cfg: &RunConfig) -> RunConfig {
    let gc = &cfg.gradcheck;
    RunConfig {
        seed: cfg.seed,
        k: gc.k,
        d_e: Some(gc.d_e),
        d_k: Some(gc.d_k),
        k_nn: gc.k_nn,
        encoder_hidden: gc.encoder_hidden,
        head_hidden: gc.head_hidden,
        dropout: 0.0,
        strategy: "ttf_amef".to_string(),
        targets: vec!["arousal".to_string()],
        avvr_context_tokens: cfg.avvr_context_tokens,
        attention_bypass: false,
        standardize_before_ccc: cfg.standardize_before_ccc,
        ..RunConfig::default()
    }
}

fn gradcheck_widths(cfg: &RunConfig) -> StreamWidths {
    let w = cfg.gradcheck.stream_widths;
    StreamWidths {
        egemaps: w[0],
        mfcc: w[1],
        boaw_e: w[2],
        boaw_m: w[3],
        deep_spectrum: w[4],
    }
}

fn loss_value(model: &Model, store: &ParamStore, bundles: &[&FeatureBundle]) -> Result<f64> {
    let mut c = Ctx::new(store, true, 0.0, Rng::new(0));
    let out = model.forward_batch(&mut c, bundles)?;
    let cat = c.tape.concat_rows(&out.preds[0])?;
    let labels: Vec<f64> = bundles
        .iter()
        .flat_map(|b| b.label_column(Target::Arousal))
        .collect();
    let n = labels.len();
    let label_node = c.constant(Tensor::new(vec![n, 1], labels)?);
    let loss = ccc_loss_on_tape(&mut c, cat, label_node)?;
    Ok(c.value(loss).data()[0])
}

/// Run the checker with the reduced dimensions in `cfg.gradcheck`.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let gcfg = gradcheck_config(cfg);
    let widths = gradcheck_widths(cfg);
    let spec = SignalSpec {
        n_train_utterances: cfg.gradcheck.utterances,
        n_devel_utterances: 1,
        frames_per_utterance: cfg.gradcheck.frames,
        widths: widths.clone(),
        ..SignalSpec::default()
    };
    let (bundles, records) = synth_corpus(&spec, cfg.seed ^ 0x6772_6164)?;
    let train: Vec<&FeatureBundle> = bundles
        .iter()
        .zip(&records)
        .filter(|(_, r)| r.split == "train")
        .map(|(b, _)| b)
        .collect();

    let model = Model::build(&gcfg, &widths)?;

    // Tape gradients from one training forward/backward.
    let analytic: Vec<(ParamId, Option<Tensor>)> = {
        let mut c = Ctx::new(&model.store, true, 0.0, Rng::new(0));
        let out = model.forward_batch(&mut c, &train)?;
        let cat = c.tape.concat_rows(&out.preds[0])?;
        let labels: Vec<f64> = train
            .iter()
            .flat_map(|b| b.label_column(Target::Arousal))
            .collect();
        let n = labels.len();
        let label_node = c.constant(Tensor::new(vec![n, 1], labels)?);
        let loss = ccc_loss_on_tape(&mut c, cat, label_node)?;
        let grads = c.tape.backward(loss)?;
        let by_param = c.param_grads(&grads);
        model
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| {
                let g = by_param.iter().find(|(pid, _)| *pid == id).map(|(_, g)| g.clone());
                (id, g)
            })
            .collect()
    };

    let mut groups: std::collections::BTreeMap<&'static str, (usize, f64)> = Default::default();
    let mut probe = model.store.clone();
    for (id, grad) in &analytic {
        let name = model.store.get(*id).name.clone();
        let layer = layer_of(&name);
        let numel = model.store.value(*id).numel();
        let entry = groups.entry(layer).or_insert((0, 0.0));
        entry.0 += 1;
        for e in 0..numel {
            let orig = probe.value(*id).data()[e];
            probe.value_mut(*id).data_mut()[e] = orig + FD_STEP;
            let fp = loss_value(&model, &probe, &train)?;
            probe.value_mut(*id).data_mut()[e] = orig - FD_STEP;
            let fm = loss_value(&model, &probe, &train)?;
            probe.value_mut(*id).data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[e]);
            let err = rel_err(a, numeric);
            if err > entry.1 {
                entry.1 = err;
            }
        }
    }

    // The loss itself: analytic closed form against finite differences.
    let mut rng = Rng::new(cfg.seed ^ 0x6c6f_7373);
    let pred: Vec<f64> = (0..16).map(|_| rng.range(-1.0, 1.0)).collect();
    let label: Vec<f64> = (0..16).map(|_| rng.range(-1.0, 1.0)).collect();
    let ga = ccc_loss_grad(&pred, &label)?;
    let gn = central_diff(&pred, |p| ccc(p, &label).unwrap().ccc_loss);
    groups.insert("ccc_loss", (1, max_rel_err(&ga, &gn)));

    let layers: Vec<LayerReport> = groups
        .into_iter()
        .map(|(layer, (params_checked, max_rel_err))| LayerReport {
            layer: layer.to_string(),
            params_checked,
            max_rel_err,
        })
        .collect();
    let max = layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        layers,
        max_rel_err: max,
    })
}
