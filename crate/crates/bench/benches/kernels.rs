use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kinject_core::graph_embed::{random_walk, skipgram_step, EmbeddingMatrix, HuffmanTree};
use kinject_core::knowledge::{build_graph, Triple};
use kinject_core::net::{BackboneConfig, ModelConfig, ModelState};
use kinject_core::rng;
use kinject_core::tensor::{Tape, Tensor};
use kinject_core::text_embed::{hash_encode, SentenceSet};
use kinject_core::Scale;
use rand::Rng;

fn conv2d(c: &mut Criterion) {
    let mut r = rng::stream(0, &[]);
    let x = Tensor::from_fn(&[32, 16, 32, 32], |_| r.gen_range(-1.0f32..1.0));
    let w = Tensor::from_fn(&[32, 16, 3, 3], |_| r.gen_range(-0.1f32..0.1));
    c.bench_function("conv2d 32x16x32x32 -> 32ch forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(wv).map(|g| g[0]))
        })
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::new(BackboneConfig::tiny(64), &[(Scale::Medium, 64)], 6);
    let model = ModelState::new(cfg, 0).unwrap();
    let mut r = rng::stream(1, &[]);
    let x = Tensor::from_fn(&[32, 3, 64, 64], |_| r.gen_range(0.0f32..1.0));
    let labels: Vec<usize> = (0..32).map(|i| i % 6).collect();
    c.bench_function("tiny backbone batch 32 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let h = model.forward_hidden(&mut tape, &bound, xv).unwrap();
            let logits = model.forward_mlp(&mut tape, &bound, h.nu).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.value(loss).data()[0])
        })
    });
}

fn skipgram(c: &mut Criterion) {
    let names: Vec<String> = (0..40).map(|i| format!("v{i}")).collect();
    let triples: Vec<Triple> = (0..40)
        .flat_map(|i| [(i, (i + 1) % 40), (i, (i + 7) % 40)])
        .map(|(a, b)| Triple::new(&names[a], "is/adjacent/to", &names[b]).unwrap())
        .collect();
    let g = build_graph(&triples, &names[..1]).unwrap();
    let tree = HuffmanTree::build(&(0..g.vertex_count()).map(|v| g.degree(v) as u64).collect::<Vec<_>>()).unwrap();
    let mut r = rng::stream(2, &[]);
    let walks: Vec<Vec<usize>> = (0..g.vertex_count()).map(|v| random_walk(&g, v, 10, &mut r)).collect();
    let mut emb = EmbeddingMatrix::zeros(g.vertices().to_vec(), 64);
    for v in 0..g.vertex_count() {
        emb.row_mut(v).iter_mut().for_each(|x| *x = r.gen_range(-0.01..0.01));
    }
    c.bench_function("skipgram 40 walks of 10, window 3, d=64", |b| {
        b.iter(|| {
            for w in &walks {
                skipgram_step(&mut emb, &tree, w, 3, 0.025);
            }
            black_box(emb.row(0)[0])
        })
    });
}

fn hash_encoder(c: &mut Criterion) {
    let sentences = SentenceSet {
        category: "tank".into(),
        sentences: (0..20)
            .map(|i| format!("tank has part barrel number {i} which is top of hull"))
            .collect(),
    };
    c.bench_function("hash_encode 20 sentences d=128", |b| {
        b.iter(|| black_box(hash_encode(&sentences, 128, 0).unwrap()))
    });
}

criterion_group!(benches, conv2d, train_step, skipgram, hash_encoder);
criterion_main!(benches);
