use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sentreason_core::evaluation::macro_f1;
use sentreason_core::prompts::{render, PromptMode};
use sentreason_core::rationale::{extract_polarities, resolve_fcfs};
use sentreason_core::training::combine_losses;
use sentreason_core::{Example, LossWeights, Polarity, Split};

const RATIONALE: &str = "The mentioned aspect towards price is about the cost. The underlying \
    opinion towards price is that a low cost need not mean low quality, which is hardly negative. \
    Therefore, the sentiment polarity towards price is positive.";

fn extraction(c: &mut Criterion) {
    c.bench_function("extract_and_resolve", |b| {
        b.iter(|| resolve_fcfs(&extract_polarities(black_box(RATIONALE))))
    });
}

fn metrics(c: &mut Criterion) {
    let gold: Vec<Polarity> = (0..1000).map(|i| Polarity::ALL[i % 3]).collect();
    let pred: Vec<Polarity> = (0..1000).map(|i| Polarity::ALL[(i * 7 / 5) % 3]).collect();
    c.bench_function("macro_f1_1000", |b| b.iter(|| macro_f1(black_box(&pred), black_box(&gold))));
}

fn prompts(c: &mut Criterion) {
    let ex = Example {
        id: "r1".into(),
        sentence: "a cheaper price should not equal a \"cheap\" product.".into(),
        aspect_term: "price".into(),
        polarity: Polarity::Positive,
        implicit: true,
        split: Split::Test,
    };
    c.bench_function("render_th_re", |b| b.iter(|| render(black_box(&ex), PromptMode::ThRe)));
}

fn losses(c: &mut Criterion) {
    let w = LossWeights { alpha: 0.3, gamma: 0.3 };
    c.bench_function("combine_losses", |b| {
        b.iter(|| combine_losses(black_box(1.2), black_box(0.7), black_box(0.4), w))
    });
}

criterion_group!(benches, extraction, metrics, prompts, losses);
criterion_main!(benches);
