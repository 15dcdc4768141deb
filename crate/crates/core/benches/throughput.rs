use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use imagine_harness::datamodel::LabelSet;
use imagine_harness::metrics::{max_over_references, ConfusionMatrix};
use imagine_harness::par::{map_ordered, Execution};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn confusion_matrix(c: &mut Criterion) {
    let labels = LabelSet::iemocap();
    let n = labels.len();
    let pairs: Vec<(usize, usize)> = (0..1_000_000).map(|i| (i % n, (i * 7919 + i / 3) % n)).collect();
    let mut group = c.benchmark_group("confusion_matrix");
    group.throughput(Throughput::Elements(pairs.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| ConfusionMatrix::from_pairs(&labels, black_box(&pairs), exec))
        });
    }
    group.finish();
}

fn answer_f1(c: &mut Criterion) {
    let words = ["the", "red", "boat", "sailed", "past", "an", "old", "lighthouse", "at", "dawn"];
    let items: Vec<(String, Vec<String>)> = (0..5_000)
        .map(|i| {
            let phrase = |k: usize| (0..6).map(|j| words[(i * 31 + j * k) % words.len()]).collect::<Vec<_>>().join(" ");
            (phrase(3), vec![phrase(7), phrase(11)])
        })
        .collect();
    let mut group = c.benchmark_group("answer_f1");
    group.throughput(Throughput::Elements(items.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| map_ordered(exec, black_box(&items), |(pred, refs)| max_over_references(pred, refs)))
        });
    }
    group.finish();
}

criterion_group!(benches, confusion_matrix, answer_f1);
criterion_main!(benches);
