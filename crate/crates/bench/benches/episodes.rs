use criterion::{criterion_group, criterion_main, Criterion};
use metaproto::protocols::{
    episode_gradient, Algorithm, AnalyticTeacher, BayesTeacher, ProtocolConfig, TaskRef, TeacherSource,
};
use metaproto::{Activation, MlpModel};
use metaproto_bench::{gauss_episode, gauss_trunk, sine_model, sine_task};

fn sinusoid(c: &mut Criterion) {
    let cfg = ProtocolConfig::sinusoid();
    let task = sine_task(3);
    let teacher = AnalyticTeacher.teacher(TaskRef::Sine(&task)).unwrap();
    let maml = sine_model();
    let embed = MlpModel::init_fan_in(&[1, 64, 64, 100], Activation::Relu, 1).unwrap();
    for (algo, model) in [(Algorithm::Maml, &maml), (Algorithm::Protoreg, &embed)] {
        c.bench_function(&format!("{algo} S/Q episode"), |b| {
            b.iter(|| episode_gradient(algo, model, TaskRef::Sine(&task), None, &cfg).unwrap())
        });
        c.bench_function(&format!("{algo} S/T episode"), |b| {
            b.iter(|| episode_gradient(algo, model, TaskRef::Sine(&task), Some(&teacher), &cfg).unwrap())
        });
    }
}

fn gaussian(c: &mut Criterion) {
    let cfg = ProtocolConfig::gaussian();
    let (ds, ep) = gauss_episode(5);
    let phi = gauss_trunk();
    let teacher = BayesTeacher { dataset: &ds }.teacher(TaskRef::Gauss(&ep)).unwrap();
    c.bench_function("protonet S/Q episode", |b| {
        b.iter(|| episode_gradient(Algorithm::Protonet, &phi, TaskRef::Gauss(&ep), None, &cfg).unwrap())
    });
    c.bench_function("protonet S/T episode", |b| {
        b.iter(|| episode_gradient(Algorithm::Protonet, &phi, TaskRef::Gauss(&ep), Some(&teacher), &cfg).unwrap())
    });
}

criterion_group!(benches, sinusoid, gaussian);
criterion_main!(benches);
