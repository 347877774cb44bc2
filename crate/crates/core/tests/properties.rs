use compressnet::arch::{builtin, count_parameters, derive_student, encode_architecture, validate, ActionVector, ArchitectureSpec};
use compressnet::data::{self, synth, BaseDataset, Split, SubsetSpec};
use compressnet::distill::{evaluate_accuracy, kd_loss_and_grad, median, DistillConfig, LatencyMeasurement};
use compressnet::nn::Model;
use compressnet::policy::{action_probabilities, PolicyParameters};
use compressnet::prune::{prune_filters, rank_filters};
use compressnet::reward::{combined_reward, TeacherReference, Thresholds};
use proptest::prelude::*;

fn teachers() -> [ArchitectureSpec; 2] {
    [builtin::desk(3), builtin::desk_residual(3)]
}

fn actions(len: usize) -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(any::<bool>(), len)
}

fn probe(model: &Model) -> Vec<f32> {
    (0..model.input_len()).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derived_students_instantiate_and_count(which in 0usize..2, raw in actions(4)) {
        let teacher = &teachers()[which];
        let a = ActionVector(raw);
        if let Ok(student) = derive_student(teacher, &a) {
            prop_assert!(validate(&student).passed());
            let model = Model::zeros(&student).unwrap();
            let out = model.forward(&probe(&model));
            prop_assert_eq!(out.len(), 3);
            let brute: usize = model.slots().iter().map(|s| s.shape.iter().product::<usize>()).sum();
            prop_assert_eq!(count_parameters(&student).unwrap(), brute);
        }
    }

    #[test]
    fn removing_more_never_grows(which in 0usize..2, raw in actions(4), extra in actions(4)) {
        let teacher = &teachers()[which];
        let a = ActionVector(raw.clone());
        let b = ActionVector(raw.iter().zip(&extra).map(|(&k, &e)| k && !e).collect());
        if let (Ok(sa), Ok(sb)) = (derive_student(teacher, &a), derive_student(teacher, &b)) {
            prop_assert!(count_parameters(&sb).unwrap() <= count_parameters(&sa).unwrap());
        }
    }

    #[test]
    fn argmax_survives_rescaling(
        a1 in 0.0..1.0f64, a2 in 0.0..1.0f64,
        t1 in 0.1..2.0f64, t2 in 0.1..2.0f64,
        c1 in 100.0..2000.0f64, c2 in 100.0..2000.0f64,
        sa in 0.1..10.0f64, st in 0.1..10.0f64, sc in 0.1..10.0f64,
    ) {
        let th = Thresholds::default();
        let r = TeacherReference { accuracy: 0.9, latency: 1.0, parameters: 1000 };
        let scaled = TeacherReference { accuracy: 0.9 * sa, latency: st, parameters: (1000.0 * sc).round() as u64 };
        let sc = scaled.parameters as f64 / 1000.0;
        let (x1, _) = combined_reward(a1, t1, c1, &r, &th).unwrap();
        let (x2, _) = combined_reward(a2, t2, c2, &r, &th).unwrap();
        let (y1, _) = combined_reward(a1 * sa, t1 * st, c1 * sc, &scaled, &th).unwrap();
        let (y2, _) = combined_reward(a2 * sa, t2 * st, c2 * sc, &scaled, &th).unwrap();
        prop_assume!((x1 - x2).abs() > 1e-9 * x1.max(x2));
        prop_assert_eq!(x1 > x2, y1 > y2);
    }

    #[test]
    fn keep_probabilities_are_probabilities(seed in any::<u64>(), bias in -4.0..4.0f64) {
        let enc = encode_architecture(&builtin::resnet18(10));
        let p = PolicyParameters::new(enc[0].len(), 6, bias, seed);
        for q in action_probabilities(&p, &enc).unwrap() {
            prop_assert!(q > 0.0 && q < 1.0);
            prop_assert!(((q) + (1.0 - q) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kd_loss_nonnegative_with_matching_gradient(
        s in proptest::collection::vec(-4.0..4.0f64, 3),
        t in proptest::collection::vec(-4.0..4.0f64, 3),
        label in 0usize..3,
        lambda in 0.0..1.0f64,
        temperature in 0.5..4.0f64,
    ) {
        let cfg = DistillConfig { lambda_soft: lambda, temperature, ..Default::default() };
        let (loss, grad) = kd_loss_and_grad(&s, &t, label, &cfg).unwrap();
        prop_assert!(loss >= 0.0);
        let h = 1e-5;
        for i in 0..3 {
            let mut up = s.clone();
            up[i] += h;
            let mut down = s.clone();
            down[i] -= h;
            let fd = (kd_loss_and_grad(&up, &t, label, &cfg).unwrap().0
                - kd_loss_and_grad(&down, &t, label, &cfg).unwrap().0)
                / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
            prop_assert!(rel < 1e-3, "component {} fd {} analytic {}", i, fd, grad[i]);
        }
    }

    #[test]
    fn median_shifts_with_constant_delay(
        xs in proptest::collection::vec(0.0..1.0f64, 1..40),
        d in 0.0..1.0f64,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + d).collect();
        prop_assert!((median(&shifted) - (median(&xs) + d)).abs() < 1e-12);
        let m = LatencyMeasurement::from_timings(shifted.clone(), 1, "test");
        prop_assert_eq!(m.median_seconds, median(&shifted));
    }
}

#[test]
fn accuracy_is_bounded_and_order_free() {
    let dir = tempfile::tempdir().unwrap();
    synth::write_dataset(BaseDataset::Cifar10, dir.path(), 2, 6, 3).unwrap();
    let spec = SubsetSpec::full(BaseDataset::Cifar10);
    let test = data::load_split(&spec, Split::Test, dir.path()).unwrap();
    let model = Model::new(&builtin::desk(10), 4).unwrap();
    let acc = evaluate_accuracy(&model, &test).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    for seed in 0..3 {
        assert_eq!(evaluate_accuracy(&model, &test.shuffled(seed)).unwrap(), acc);
    }
}

#[test]
fn subsets_partition_counts_and_shuffle_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    synth::write_dataset(BaseDataset::Cifar10, dir.path(), 4, 2, 9).unwrap();
    let full = data::load_split(&SubsetSpec::full(BaseDataset::Cifar10), Split::Train, dir.path()).unwrap();
    let names = BaseDataset::Cifar10.class_names();
    let parts = [&names[..3], &names[3..7], &names[7..]];
    let mut counts = vec![0usize; 10];
    for (i, part) in parts.iter().enumerate() {
        let spec = SubsetSpec::new(BaseDataset::Cifar10, &format!("p{i}"), part).unwrap();
        let d = data::load_split(&spec, Split::Train, dir.path()).unwrap();
        for j in 0..d.len() {
            counts[d.original_label(j)] += 1;
        }
    }
    assert_eq!(counts, full.class_counts());

    let a = full.shuffled(11);
    let b = full.shuffled(11);
    assert_eq!(a.labels(), b.labels());
    assert!((0..a.len()).all(|i| a.raw_image(i) == b.raw_image(i)));
}

#[test]
fn pruning_keeps_class_count_and_counts_parameters() {
    let dir = tempfile::tempdir().unwrap();
    synth::write_dataset(BaseDataset::Cifar10, dir.path(), 3, 1, 5).unwrap();
    let train = data::load_split(&SubsetSpec::full(BaseDataset::Cifar10), Split::Train, dir.path()).unwrap();
    for arch in [builtin::desk(10), builtin::desk_residual(10)] {
        let model = Model::new(&arch, 2).unwrap();
        let ranks = rank_filters(&model, &train).unwrap();
        assert_eq!(ranks, rank_filters(&model, &train).unwrap());
        for count in [1, 5, 20] {
            let pruned = prune_filters(&model, &ranks, count).unwrap();
            assert_eq!(pruned.arch().num_classes, 10);
            assert_eq!(pruned.model.forward(&probe(&pruned.model)).len(), 10);
            assert_eq!(count_parameters(pruned.arch()).unwrap(), pruned.model.num_parameters());
        }
    }
}

fn stack(extra: usize) -> ArchitectureSpec {
    use compressnet::arch::{Family, InputShape, LayerDescriptor as L};
    let mut layers = vec![L::conv3(16), L::conv3(16)];
    layers.extend((0..extra).map(|_| L::conv3(16)));
    layers.extend([L::pool(2, 2), L::flatten(), L::linear(10)]);
    ArchitectureSpec::new(layers, InputShape::CIFAR, 10, Family::Sequential)
}

#[test]
fn latency_orders_models_and_repeats() {
    use compressnet::distill::{measure_latency, LatencySettings};
    let settings = LatencySettings { warmup: 3, samples: 15 };
    let small = Model::new(&stack(0), 1).unwrap();
    let large = Model::new(&stack(10), 1).unwrap();
    let b = measure_latency(&small, small.input_len(), settings).unwrap();
    let a = measure_latency(&large, large.input_len(), settings).unwrap();
    assert!(b.median_seconds < a.median_seconds, "{} vs {}", b.median_seconds, a.median_seconds);
    assert_eq!(a.timings.len(), 15);

    // Other tests share the machine, so allow a few attempts at stability.
    let stable = (0..5).any(|_| {
        let x = measure_latency(&large, large.input_len(), settings).unwrap().median_seconds;
        let y = measure_latency(&large, large.input_len(), settings).unwrap().median_seconds;
        (x - y).abs() <= 0.2 * x.min(y)
    });
    assert!(stable);
}
