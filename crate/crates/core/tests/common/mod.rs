#![allow(dead_code)]

use std::path::Path;

use poetx::dense::Rng;

const SUBJECTS: &[&str] = &[
    "the old man", "a young woman", "the small dog", "my brother", "the teacher", "our neighbour", "the captain",
    "a tired farmer", "the doctor", "her mother", "the children", "a quiet student", "the king", "his friend",
];
const VERBS: &[&str] = &[
    "walked to", "looked at", "talked about", "found", "carried", "remembered", "waited for", "painted", "opened",
    "closed", "followed", "watched", "cleaned", "bought",
];
const OBJECTS: &[&str] = &[
    "the house", "a red door", "the river", "an empty box", "the garden", "a long letter", "the window", "the market",
    "a wooden table", "the city", "the mountain", "a green field", "the station", "an apple",
];
const TAILS: &[&str] = &[
    "in the morning", "after dinner", "with great care", "before the rain", "at the end of the day", "without a word",
    "near the bridge", "for a long time", "again and again", "under the trees",
];
const LINKS: &[&str] = &["and then", "but", "because", "so", "while"];

fn pick<'a>(words: &[&'a str], rng: &mut Rng) -> &'a str {
    words[rng.below(words.len())]
}

fn clause(rng: &mut Rng, out: &mut String) {
    out.push_str(pick(SUBJECTS, rng));
    out.push(' ');
    out.push_str(pick(VERBS, rng));
    out.push(' ');
    out.push_str(pick(OBJECTS, rng));
    if rng.uniform() < 0.5 {
        out.push(' ');
        out.push_str(pick(TAILS, rng));
    }
}

/// Deterministic English-like text of about `bytes` bytes.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let mut s = String::with_capacity(bytes + 128);
    while s.len() < bytes {
        let start = s.len();
        clause(&mut rng, &mut s);
        if rng.uniform() < 0.4 {
            s.push_str(", ");
            s.push_str(pick(LINKS, &mut rng));
            s.push(' ');
            clause(&mut rng, &mut s);
        }
        s.push_str(". ");
        if let Some(c) = s[start..].chars().next() {
            let up = c.to_ascii_uppercase().to_string();
            s.replace_range(start..start + 1, &up);
        }
        if rng.uniform() < 0.1 {
            s.push('\n');
        }
    }
    s.truncate(bytes);
    s
}

pub fn write_corpus(path: &Path, bytes: usize, seed: u64) {
    std::fs::write(path, synthetic_corpus(bytes, seed)).expect("write corpus");
}

use std::sync::Arc;

use poetx::cnp::{skew_from_packed, NeumannOrder, SkewParams};
use poetx::dense::{gaussian_matrix, BlockStack, Matrix};
use poetx::layer::{init_layer, PoetLinearLayer, Variant};
use poetx::tape::{backward_graph, forward_graph, ActivationLedger, Batch, LossKind, Model, Stage};

pub fn random_layer(m: usize, n: usize, b: usize, variant: Variant, q_scale: f64, seed: u64) -> PoetLinearLayer<f64> {
    let mut rng = Rng::new(seed);
    let mut layer = init_layer::<f64>(m, n, b, variant, NeumannOrder::default(), None, &mut rng).unwrap();
    randomize_q(&mut layer, q_scale, &mut rng);
    layer
}

pub fn randomize_q(layer: &mut PoetLinearLayer<f64>, q_scale: f64, rng: &mut Rng) {
    let (r, p) = layer.skew_params_mut();
    for v in r.packed_mut().iter_mut().chain(p.packed_mut().iter_mut()) {
        *v = q_scale * rng.normal();
    }
}

pub fn input(batch: usize, m: usize, seed: u64) -> Arc<Matrix<f64>> {
    Arc::new(gaussian_matrix(batch, m, 1.0, &mut Rng::new(seed)).unwrap())
}

/// Random skew stack scaled to stack Frobenius norm `frob`.
pub fn skew_stack(nb: usize, b: usize, frob: f64, rng: &mut Rng) -> (SkewParams<f64>, BlockStack<f64>) {
    let len = nb * b * (b - 1) / 2;
    let mut p = SkewParams::from_vec(nb, b, (0..len).map(|_| rng.normal()).collect()).unwrap();
    let norm = skew_from_packed(&p).frobenius_norm();
    p.packed_mut().iter_mut().for_each(|v| *v *= frob / norm);
    let q = skew_from_packed(&p);
    (p, q)
}

/// Poet -> tanh -> Poet regressor with random factors.
pub fn two_layer_model(dims: (usize, usize, usize), b: usize, variant: Variant, seed: u64) -> (Model<f64>, Batch<f64>) {
    let (m, h, n) = dims;
    let model = Model {
        stages: vec![
            Stage::Poet(random_layer(m, h, b, variant, 0.1, seed)),
            Stage::Tanh,
            Stage::Poet(random_layer(h, n, b, variant, 0.1, seed + 1)),
        ],
        loss: LossKind::Mse,
    };
    let batch = Batch::Regression { x: input(5, m, seed + 2), y: gaussian_matrix(5, n, 1.0, &mut Rng::new(seed + 3)).unwrap() };
    (model, batch)
}

pub fn loss_of(model: &Model<f64>, batch: &Batch<f64>) -> f64 {
    forward_graph(model, batch, &mut ActivationLedger::new()).unwrap().0
}

/// Analytic and central-difference gradients over every trainable parameter.
pub fn model_gradients(model: &Model<f64>, batch: &Batch<f64>, h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut ledger = ActivationLedger::new();
    let (_, mut tape) = forward_graph(model, batch, &mut ledger).unwrap();
    let grads = backward_graph(model, &mut tape, &mut ledger).unwrap();
    let analytic: Vec<f64> = grads.groups().iter().flat_map(|g| g.iter().copied()).collect();
    let sizes: Vec<usize> = model.param_group_sizes().iter().map(|&(_, n)| n).collect();
    let mut fd = Vec::with_capacity(analytic.len());
    let mut work = model.clone();
    for (gi, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = work.param_groups_mut()[gi].values[i];
            work.param_groups_mut()[gi].values[i] = orig + h;
            let up = loss_of(&work, batch);
            work.param_groups_mut()[gi].values[i] = orig - h;
            let down = loss_of(&work, batch);
            work.param_groups_mut()[gi].values[i] = orig;
            fd.push((up - down) / (2.0 * h));
        }
    }
    (analytic, fd)
}

/// Worst per-coordinate relative error, with denominators floored at `floor`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}
