//! End-to-end finite-difference checks: every parameter gradient of the full
//! two-view objective on a tiny encoder configuration.

use hico_core::autodiff::{grad_check_with_floor, Init, Phase, Tape, TapeId, Tensor};
use hico_core::encoder::{BackboneConfig, Binding, TinyFpn};
use hico_core::losses;

fn tiny_cfg() -> BackboneConfig {
    BackboneConfig {
        in_channels: 1,
        stem_channels: 4,
        stage_channels: [4, 4, 4, 4],
        fpn_channels: 4,
        embed_dim: 4,
        num_classes: 3,
        input_hw: 8,
        stem_downsample: false,
        head_relu: false,
    }
}

fn view(seed: u64) -> Tensor {
    Tensor::create(&[2, 1, 8, 8], Init::Uniform { lo: 0.05, hi: 0.95, seed }).unwrap()
}

/// Rebuild the model fresh for every probe so BatchNorm running statistics
/// never leak between finite-difference evaluations.
fn run_model(
    proto: &TinyFpn,
    names: &[String],
    tape: &mut Tape,
    ids: &[TapeId],
    v1: &Tensor,
    v2: &Tensor,
) -> hico_core::Result<(hico_core::encoder::ViewOutput, hico_core::encoder::ViewOutput)> {
    let mut model = proto.clone();
    let binding = Binding::from_parts(names, ids)?;
    model.forward_pair(tape, &binding, v1.clone(), v2.clone(), Phase::Train)
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    // Generic probe point: embedding rows must stay away from zero, where
    // row normalization is correct but ill-conditioned (Jacobian ~ 1/norm)
    // and central differences cannot follow it.
    let model = TinyFpn::new(cfg, 41).unwrap();
    let names = model.param_names();
    let params = model.named_parameters();
    let (v1, v2) = (view(81), view(82));

    let f = |tape: &mut Tape, ids: &[TapeId]| {
        let (o1, o2) = run_model(&model, &names, tape, ids, &v1, &v2)?;
        let peer: Vec<TapeId> = [
            (o1.embeddings.local, o2.embeddings.local),
            (o1.embeddings.medium, o2.embeddings.medium),
            (o1.embeddings.global_, o2.embeddings.global_),
        ]
        .into_iter()
        .map(|(a, b)| losses::peer_level_loss(tape, a, b, 0.5))
        .collect::<hico_core::Result<_>>()?;
        let cross: Vec<TapeId> = [
            (o1.embeddings.local, o2.embeddings.local),
            (o1.embeddings.medium, o2.embeddings.medium),
        ]
        .into_iter()
        .map(|(a, b)| {
            losses::cross_level_loss(tape, o1.embeddings.global_, o2.embeddings.global_, a, b, 0.5)
        })
        .collect::<hico_core::Result<_>>()?;
        let l_con = losses::overall_contrastive(tape, &peer, &cross, 0.5)?;
        let targets = losses::soften_labels(&[0, 2], 3, 0.2, 8)?;
        let l_soft = losses::softened_ce(tape, o1.logits, o2.logits, &targets, &[0.25, 0.25])?;
        losses::total_loss(tape, l_con, l_soft, 0.2)
    };

    // The 1e-4 floor keeps the comparison absolute for gradients that sink
    // under finite-difference noise (C5's BatchNorm normalizes two values at
    // this configuration, leaving its upstream gradients near zero).
    let err = grad_check_with_floor(f, &params, 1e-5, 1e-4).unwrap();
    assert!(err <= 1e-4, "max relative gradient error {err:e}");
}

#[test]
fn embedding_functional_gradients_match_finite_differences() {
    // A scalar probe of all three embeddings, without the NCE machinery:
    // isolates backbone, pyramid and head gradients.
    let cfg = tiny_cfg();
    let model = TinyFpn::new(cfg, 41).unwrap();
    let names = model.param_names();
    let params = model.named_parameters();
    let (v1, v2) = (view(81), view(82));

    let f = |tape: &mut Tape, ids: &[TapeId]| {
        let (o1, _o2) = run_model(&model, &names, tape, ids, &v1, &v2)?;
        let terms = [o1.embeddings.local, o1.embeddings.medium, o1.embeddings.global_, o1.logits];
        let mut total = None;
        for t in terms {
            let sq = tape.mul(t, t)?;
            let s = tape.sum(sq)?;
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        Ok(total.unwrap())
    };

    let err = grad_check_with_floor(f, &params, 1e-5, 1e-4).unwrap();
    assert!(err <= 1e-4, "max relative gradient error {err:e}");
}

