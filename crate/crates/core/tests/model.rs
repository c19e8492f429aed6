// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::fs;

use reasonlens_core::archive::Archive;
use reasonlens_core::tensor::row_softmax;
use reasonlens_core::{
    Error, HookPoint, Intervention, LogitRows, Model, ProcessingMode, RowSelect, Scalar, Tensor, TokenId,
};
use serde::Deserialize;

use common::{tiny, tiny_dir};

#[derive(Deserialize)]
struct LogitFixture {
    ids: Vec<TokenId>,
    logits: Vec<Vec<f32>>,
}

fn fixtures() -> Vec<LogitFixture> {
    fs::read_to_string(tiny_dir().join("logits.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn log_softmax<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    row_softmax(t).data().iter().map(|p| p.as_f64().ln()).collect()
}

fn prompt_ids() -> Vec<Vec<TokenId>> {
    fixtures().into_iter().map(|f| f.ids).collect()
}

#[test]
fn raw_logits_match_reference_implementation() {
    let model = tiny::<f32>(ProcessingMode::Raw);
    let cases = fixtures();
    assert_eq!(cases.len(), 6);
    for case in cases {
        let out = model.forward(&case.ids, &[], &[]).unwrap();
        assert_eq!(out.logits.shape(), &[case.ids.len(), 320]);
        for (i, want) in case.logits.iter().enumerate() {
            for (got, want) in out.logits.row(i).iter().zip(want) {
                assert!(
                    (got - want).abs() < 1e-4,
                    "len {} row {i}: {got} vs {want}",
                    case.ids.len()
                );
            }
        }
    }
}

#[test]
fn processed_distributions_equal_raw() {
    fn check<T: Scalar>(tol: f64) {
        let raw = tiny::<T>(ProcessingMode::Raw);
        let processed = tiny::<T>(ProcessingMode::Processed);
        for ids in prompt_ids() {
            let a = raw.forward(&ids, &[], &[]).unwrap().logits;
            let b = processed.forward(&ids, &[], &[]).unwrap().logits;
            for i in 0..ids.len() {
                let la = log_softmax(&a.row_vector(i));
                let lb = log_softmax(&b.row_vector(i));
                for (x, y) in la.iter().zip(&lb) {
                    assert!((x - y).abs() < tol, "{x} vs {y}");
                }
            }
        }
    }
    check::<f32>(1e-4);
    check::<f64>(1e-9);
}

#[test]
fn processed_weights_are_centered() {
    let m = tiny::<f64>(ProcessingMode::Processed);
    let w = &m.weights;
    assert!(w.ln_f.is_none() && w.blocks.iter().all(|b| b.ln_1.is_none() && b.ln_2.is_none()));
    let row_means_zero = |t: &Tensor<f64>| (0..t.rows()).all(|r| t.row(r).iter().sum::<f64>().abs() < 1e-9);
    assert!(row_means_zero(&w.w_e));
    assert!(row_means_zero(&w.w_pos));
    assert!(row_means_zero(&w.w_u));
    assert!(w.b_u.data().iter().sum::<f64>().abs() < 1e-9);
    for b in &w.blocks {
        assert!(row_means_zero(&b.w_o) && row_means_zero(&b.w_out));
        assert!(b.b_o.data().iter().sum::<f64>().abs() < 1e-9);
    }
}

#[test]
fn heads_plus_bias_reconstruct_attention_output() {
    for mode in [ProcessingMode::Raw, ProcessingMode::Processed] {
        let m = tiny::<f32>(mode);
        let mut capture = vec![];
        for l in 0..3 {
            capture.push(HookPoint::AttnSum(l));
            capture.extend((0..4).map(|h| HookPoint::HeadOutput { layer: l, head: h }));
        }
        for ids in prompt_ids() {
            let out = m.forward(&ids, &[], &capture).unwrap();
            for l in 0..3 {
                let mut sum = Tensor::zeros(vec![ids.len(), 24]);
                for h in 0..4 {
                    sum.add_assign(out.cache.head_output(l, h).unwrap()).unwrap();
                }
                sum.add_to_rows(m.weights.blocks[l].b_o.data()).unwrap();
                let attn = out.cache.get(HookPoint::AttnSum(l)).unwrap();
                for (a, b) in sum.data().iter().zip(attn.data()) {
                    assert!((a - b).abs() < 1e-4);
                }
            }
        }
    }
}

#[test]
fn capturing_heads_does_not_change_logits() {
    let m = tiny::<f64>(ProcessingMode::Raw);
    let ids = &prompt_ids()[3];
    let plain = m.forward(ids, &[], &[]).unwrap().logits;
    let heads: Vec<_> = (0..4).map(|h| HookPoint::HeadOutput { layer: 1, head: h }).collect();
    let hooked = m.forward(ids, &[], &heads).unwrap().logits;
    for (a, b) in plain.data().iter().zip(hooked.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn logit_lens_on_final_residual_is_the_output() {
    let m = tiny::<f32>(ProcessingMode::Processed);
    for ids in prompt_ids() {
        let out = m.forward(&ids, &[], &[HookPoint::ResidPost(2)]).unwrap();
        let lens = m.unembed(out.cache.get(HookPoint::ResidPost(2)).unwrap()).unwrap();
        assert_eq!(lens.data(), out.logits.data());
        assert_eq!(
            row_softmax(&lens.row_vector(ids.len() - 1)).data(),
            out.next_token_distribution().data()
        );
    }
}

#[test]
fn earlier_positions_ignore_later_tokens() {
    let m = tiny::<f64>(ProcessingMode::Raw);
    let ids: Vec<TokenId> = (0..20).map(|i| (i * 37 + 11) % 320).collect();
    let full = m.forward(&ids, &[], &[]).unwrap().logits;
    for n in [1, 5, 13] {
        let prefix = m.forward(&ids[..n], &[], &[]).unwrap().logits;
        for i in 0..n {
            for (a, b) in prefix.row(i).iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn identity_and_zero_interventions_change_nothing() {
    let m = tiny::<f32>(ProcessingMode::Processed);
    let ids = &prompt_ids()[4];
    let plain = m.forward(ids, &[], &[]).unwrap().logits;
    let zero = Tensor::zeros(vec![24]);
    let ivs = vec![
        Intervention::new(HookPoint::MlpOut(0), Ok),
        Intervention::add_vector(HookPoint::AttnSum(1), &zero, 5.0, RowSelect::All),
        Intervention::add_vector(HookPoint::HeadOutput { layer: 2, head: 3 }, &zero, 1.0, RowSelect::Last),
    ];
    let hooked = m.forward(ids, &ivs, &[]).unwrap().logits;
    // a head hook sums per-head products, which reorders float additions
    for (a, b) in plain.data().iter().zip(hooked.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn interventions_compose_in_order() {
    let m = tiny::<f64>(ProcessingMode::Raw);
    let ids = &prompt_ids()[2];
    let point = HookPoint::ResidPost(0);
    let ivs = vec![
        Intervention::new(point, |t: Tensor<f64>| Ok(t.map(|x| x + 1.0))),
        Intervention::new(point, |t: Tensor<f64>| Ok(t.scale(2.0))),
    ];
    let plain = m.forward(ids, &[], &[point]).unwrap();
    let hooked = m.forward(ids, &ivs, &[point]).unwrap();
    let before = plain.cache.get(point).unwrap();
    let after = hooked.cache.get(point).unwrap();
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((2.0 * (a + 1.0) - b).abs() < 1e-12);
    }
}

#[test]
fn zeroed_value_weights_silence_a_head() {
    let raw = tiny::<f64>(ProcessingMode::Raw);
    let (l, h) = (1, 2);
    let mut w = raw.weights.clone();
    let block = &mut w.blocks[l];
    for r in 0..24 {
        block.w_v.row_mut(r)[h * 6..(h + 1) * 6].fill(0.0);
    }
    block.b_v.data_mut()[h * 6..(h + 1) * 6].fill(0.0);
    let m = Model::from_weights(raw.config.clone(), w, ProcessingMode::Raw).unwrap();
    let ids = &prompt_ids()[3];
    let out = m
        .forward(ids, &[], &[HookPoint::HeadOutput { layer: l, head: h }])
        .unwrap();
    assert!(out.cache.head_output(l, h).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn resume_reproduces_full_pass() {
    let m = tiny::<f32>(ProcessingMode::Processed);
    let ids = &prompt_ids()[4];
    let capture = [HookPoint::ResidPost(0), HookPoint::ResidPost(1)];
    let full = m.forward_with(ids, &[], &capture, LogitRows::Last).unwrap();
    for start in 1..3 {
        let r = full.cache.get(HookPoint::ResidPost(start - 1)).unwrap().clone();
        let resumed = m.resume(r, start, &[], &[], LogitRows::Last).unwrap();
        assert_eq!(resumed.logits.data(), full.logits.data());
    }
    let emb = m.embed(ids).unwrap();
    let resumed = m.resume(emb, 0, &[], &[], LogitRows::Last).unwrap();
    assert_eq!(resumed.logits.data(), full.logits.data());
    let r = full.cache.get(HookPoint::ResidPost(1)).unwrap().clone();
    assert!(m.resume(r, 2, &[], &[HookPoint::AttnSum(1)], LogitRows::Last).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = tiny::<f32>(ProcessingMode::Raw);
    assert!(matches!(m.forward(&[], &[], &[]), Err(Error::InvalidArgument(_))));
    let long: Vec<TokenId> = vec![1; 33];
    assert!(matches!(
        m.forward(&long, &[], &[]),
        Err(Error::ContextOverflow { len: 33, max: 32 })
    ));
    assert!(m.forward(&[320], &[], &[]).is_err());
    assert!(matches!(
        m.forward(&[1], &[], &[HookPoint::AttnSum(3)]),
        Err(Error::Hook(_))
    ));
    let shrink = Intervention::new(HookPoint::Embed, |_t: Tensor<f32>| Ok(Tensor::zeros(vec![1, 1])));
    assert!(m.forward(&[1, 2], &[shrink], &[]).is_err());
    assert!(m
        .forward(&[1, 2], &[], &[])
        .unwrap()
        .cache
        .get(HookPoint::Embed)
        .is_err());
}

#[test]
fn greedy_generation_extends_the_prompt() {
    let m = tiny::<f32>(ProcessingMode::Raw);
    let seq = m.generate_greedy(&[5, 6, 7], 4).unwrap();
    assert_eq!(seq.len(), 7);
    assert_eq!(&seq[..3], &[5, 6, 7]);
    assert_eq!(seq, m.generate_greedy(&[5, 6, 7], 4).unwrap());
}

#[test]
fn archive_round_trip_preserves_outputs() {
    let m = tiny::<f32>(ProcessingMode::Raw);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.safetensors");
    reasonlens_core::model::write_archive(&path, &m.config, &m.weights).unwrap();
    let back = Model::<f32>::from_archive(&path, ProcessingMode::Raw).unwrap();
    let ids = &prompt_ids()[2];
    assert_eq!(
        m.forward(ids, &[], &[]).unwrap().logits.data(),
        back.forward(ids, &[], &[]).unwrap().logits.data()
    );
    assert!(!reasonlens_core::archive::partial_path(&path).exists());
}

#[test]
fn truncated_archive_names_a_tensor() {
    let bytes = fs::read(tiny_dir().join("model.safetensors")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.safetensors");
    fs::write(&path, &bytes[..bytes.len() - 1000]).unwrap();
    let err = Model::<f32>::from_archive(&path, ProcessingMode::Raw).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("cut.safetensors") && msg.contains('`'), "{msg}");
}

#[test]
fn misshaped_or_missing_tensor_is_named() {
    let src = Archive::read(&tiny_dir().join("model.safetensors")).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut bad = src.clone();
    bad.insert("h.1.attn.wv.w", &Tensor::<f32>::zeros(vec![24, 23]));
    let path = dir.path().join("shape.safetensors");
    bad.write(&path).unwrap();
    let msg = Model::<f32>::from_archive(&path, ProcessingMode::Raw)
        .unwrap_err()
        .to_string();
    assert!(msg.contains("h.1.attn.wv.w"), "{msg}");

    let mut bad = src.clone();
    bad.tensors.remove("h.2.mlp.wf.b");
    let path = dir.path().join("missing.safetensors");
    bad.write(&path).unwrap();
    let msg = Model::<f32>::from_archive(&path, ProcessingMode::Raw)
        .unwrap_err()
        .to_string();
    assert!(msg.contains("h.2.mlp.wf.b"), "{msg}");
}

#[test]
fn other_attention_variants_are_unsupported() {
    let mut a = Archive::read(&tiny_dir().join("model.safetensors")).unwrap();
    a.metadata.insert("attention".into(), "gpt-neo-local".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("neo.safetensors");
    a.write(&path).unwrap();
    assert!(matches!(
        Model::<f32>::from_archive(&path, ProcessingMode::Raw),
        Err(Error::Unsupported(_))
    ));
}
