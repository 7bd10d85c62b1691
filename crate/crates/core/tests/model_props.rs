mod common;

use common::{random_graph, rng};
use hlmg::graph::{Graph, TaskQuery};
use hlmg::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use hlmg::text::{serialize, tokenize, Dialect, SerializeOptions, TokenizedSample, Vocabulary};
use hlmg_tensor::Tape;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn encode(g: &Graph, order: Option<Vec<usize>>, vocab: Option<&Vocabulary>) -> (TokenizedSample, Vocabulary) {
    let opts = SerializeOptions {
        order,
        ..SerializeOptions::new(Dialect::Cgdl)
    };
    let s = serialize(g, &TaskQuery::Components, &opts).unwrap();
    let vocab = vocab.cloned().unwrap_or_else(|| Vocabulary::build([&s]).unwrap());
    (tokenize(&s, &vocab, 4096).unwrap(), vocab)
}

fn hidden<T: hlmg_tensor::Scalar>(m: &Model<T>, t: &TokenizedSample) -> Vec<T> {
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, t, false, 0).unwrap();
    tape.value(f.hidden).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn local_block_ignores_tokens_outside_the_segment(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 8);
        let (t, vocab) = encode(&g, None, None);
        let cfg = ModelConfig { dropout: 0.0, attn_dropout: 0.0, ..ModelConfig::desk(vocab.len(), 4) };
        let m: Model<f32> = Model::init(cfg, seed).unwrap();
        let (segments, _) = hlmg::model::segments_of(&t).unwrap();
        let keep = r.random_range(0..segments.len());
        let mut moved = t.clone();
        for (si, &(s, e)) in segments.iter().enumerate() {
            if si != keep {
                for id in &mut moved.ids[s..e] {
                    *id = r.random_range(0..vocab.len() as u32);
                }
            }
        }
        let d = m.config.dim;
        let (a, b) = (hidden(&m, &t), hidden(&m, &moved));
        let (s, e) = segments[keep];
        let same = a[s * d..e * d].iter().zip(&b[s * d..e * d]).all(|(x, y)| x.to_bits() == y.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn logits_do_not_depend_on_segment_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 9);
        let (t, vocab) = encode(&g, None, None);
        let mut order: Vec<usize> = (0..g.num_nodes()).collect();
        order.shuffle(&mut r);
        let (moved, _) = encode(&g, Some(order), Some(&vocab));
        let m: Model<f64> = Model::init(ModelConfig::desk(vocab.len(), 5), seed).unwrap();
        let a = m.inspect(&t).unwrap();
        let b = m.inspect(&moved).unwrap();
        let norm = a.logits.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff = a.logits.iter().zip(&b.logits).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-10 * norm.max(1.0), "{diff}");
        for (ra, rb) in a.query_attention.iter().zip(&b.query_attention) {
            for (pa, &node) in a.node_order.iter().enumerate() {
                let pb = b.node_order.iter().position(|&x| x == node).unwrap();
                prop_assert!((ra[pa] - rb[pb]).abs() < 1e-12);
            }
            prop_assert!((ra.last().unwrap() - rb.last().unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_preserves_predictions_and_vocabulary() {
    let g = Graph::from_edges(5, [(0, 1), (1, 2), (3, 4)]).unwrap();
    let (t, vocab) = encode(&g, None, None);
    let m: Model<f32> = Model::init(ModelConfig::desk(vocab.len(), 3), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, Some(&vocab), &path).unwrap();
    let back = load_checkpoint(&path, None).unwrap();
    assert_eq!(back.vocab.as_ref(), Some(&vocab));
    let a = m.logits(&t).unwrap();
    let b = back.model.logits(&t).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn unknown_token_ids_fall_back_to_unk() {
    let g = Graph::from_edges(3, [(0, 1)]).unwrap();
    let (mut t, vocab) = encode(&g, None, None);
    let m: Model<f32> = Model::init(ModelConfig::tiny(vocab.len(), 2), 1).unwrap();
    t.ids[0] = vocab.len() as u32 + 50;
    assert!(m.logits(&t).unwrap().iter().all(|x| x.is_finite()));
}
