//! In-memory end-to-end run over the synthetic benchmark: three incremental
//! steps, joint and source-free modes, with accuracy and retention checks.
//! The file-backed variant of this flow lives in the companion crate; this
//! test pins the core training dynamics.

use attralign_core::encoder::ImageInput;
use attralign_core::losses::TrainingMode;
use attralign_core::metrics::{self, PredictionRecord, TaskMetrics};
use attralign_core::prompt::ClassContext;
use attralign_core::synth::{self, SynthBenchmark, SynthConfig};
use attralign_core::toy::ToyEncoder;
use attralign_core::trainer::{self, RunState, SourceItem, TargetItem, TrainHyper};
use attralign_core::VisualFeature;

struct Prepared {
    enc: ToyEncoder,
    bench: SynthBenchmark,
    ctx: ClassContext,
    source: Vec<SourceItem>,
    target_steps: Vec<Vec<TargetItem>>,
    target_truth: Vec<Vec<(String, usize, usize)>>,
}

fn prepare(seed: u64) -> Prepared {
    let enc = ToyEncoder::with_defaults(seed).unwrap();
    let config = SynthConfig {
        examples_per_class: 60,
        seed,
        ..SynthConfig::default()
    };
    let bench = synth::generate(&enc, &config).unwrap();
    let ctx = ClassContext::build(&enc, &bench.class_names, "a photo of a {}").unwrap();

    let source = trainer::encode_source_items(
        &enc,
        bench
            .source
            .iter()
            .map(|e| (ImageInput::Vector(e.input.clone()), e.id.clone(), e.class)),
    )
    .unwrap();

    let mut target_steps = Vec::new();
    let mut target_truth = Vec::new();
    for t in 0..bench.schedule.num_steps() {
        let classes = bench.schedule.step_classes(t).to_vec();
        let step_examples: Vec<_> = bench
            .target
            .iter()
            .filter(|e| classes.contains(&e.class))
            .collect();
        let items = trainer::encode_target_items(
            &enc,
            step_examples
                .iter()
                .map(|e| (ImageInput::Vector(e.input.clone()), e.id.clone())),
        )
        .unwrap();
        let truth = step_examples
            .iter()
            .map(|e| (e.id.clone(), e.class, t))
            .collect();
        target_steps.push(items);
        target_truth.push(truth);
    }
    Prepared {
        enc,
        bench,
        ctx,
        source,
        target_steps,
        target_truth,
    }
}

fn evaluate_cumulative(
    p: &Prepared,
    state: &RunState,
    hyper: &TrainHyper,
    upto_step: usize,
) -> Vec<PredictionRecord> {
    let dict = state.target_dict.as_ref().expect("trained dictionary");
    let tau = hyper.resolve_tau(&p.enc);
    let mut records = Vec::new();
    for t in 0..=upto_step {
        for (item, (id, true_class, step)) in p.target_steps[t].iter().zip(&p.target_truth[t]) {
            let predicted =
                metrics::predict(&p.enc, dict, &p.ctx, &item.feature, hyper.select, tau).unwrap();
            records.push(PredictionRecord {
                example_id: id.clone(),
                true_class: *true_class,
                predicted,
                example_step: *step,
                eval_step: upto_step,
            });
        }
    }
    records
}

fn run_joint(p: &Prepared, hyper: &TrainHyper) -> TaskMetrics {
    let feats: Vec<VisualFeature> = p.source.iter().map(|s| s.feature.clone()).collect();
    let mut state = RunState::new(&p.enc, p.bench.class_names.len(), hyper, &feats).unwrap();
    let mut per_step = Vec::new();
    for t in 0..p.target_steps.len() {
        trainer::run_step(
            &mut state,
            &p.enc,
            &p.ctx,
            hyper,
            TrainingMode::Joint,
            t,
            &p.source,
            &p.target_steps[t],
            &mut |_| {},
        )
        .unwrap();
        per_step.push(evaluate_cumulative(p, &state, hyper, t));
    }
    TaskMetrics::from_records("synthetic-joint", &per_step).unwrap()
}

fn run_source_free(p: &Prepared, hyper: &TrainHyper) -> TaskMetrics {
    let feats: Vec<VisualFeature> = p.source.iter().map(|s| s.feature.clone()).collect();
    let mut state = RunState::new(&p.enc, p.bench.class_names.len(), hyper, &feats).unwrap();
    trainer::run_source_pretrain(&mut state, &p.enc, &p.ctx, hyper, &p.source, &mut |_| {}).unwrap();
    let pretrained_source = state.source_dict.values_checksum();
    let mut per_step = Vec::new();
    for t in 0..p.target_steps.len() {
        trainer::run_step(
            &mut state,
            &p.enc,
            &p.ctx,
            hyper,
            TrainingMode::TargetDeploy,
            t,
            &[],
            &p.target_steps[t],
            &mut |_| {},
        )
        .unwrap();
        per_step.push(evaluate_cumulative(p, &state, hyper, t));
    }
    assert_eq!(
        state.source_dict.values_checksum(),
        pretrained_source,
        "source values must stay frozen through deployment"
    );
    TaskMetrics::from_records("synthetic-source-free", &per_step).unwrap()
}

#[test]
fn joint_three_step_run_learns_and_retains() {
    let p = prepare(5);
    let mut hyper = TrainHyper::synthetic();
    hyper.epochs_per_step = 4;
    hyper.seed = 5;
    let m = run_joint(&p, &hyper);
    println!(
        "joint: step={:?} s1={:?} final={:.2}",
        m.step_accuracy, m.s1_accuracy, m.final_accuracy
    );
    assert!(m.final_accuracy >= 95.0, "final accuracy {}", m.final_accuracy);
    let retention = m.s1_accuracy.last().unwrap() / m.s1_accuracy[0];
    assert!(retention >= 0.9, "step-1 retention {retention}");
}

#[test]
fn source_free_stays_close_to_joint() {
    let p = prepare(6);
    let mut hyper = TrainHyper::synthetic();
    hyper.epochs_per_step = 4;
    hyper.seed = 6;
    let joint = run_joint(&p, &hyper);
    let sf = run_source_free(&p, &hyper);
    println!(
        "joint={:.2} source_free={:.2}",
        joint.final_accuracy, sf.final_accuracy
    );
    assert!((joint.final_accuracy - sf.final_accuracy).abs() <= 5.0);
}

#[test]
fn same_seed_runs_are_identical() {
    let p = prepare(7);
    let mut hyper = TrainHyper::synthetic();
    hyper.epochs_per_step = 2;
    hyper.seed = 7;
    let a = run_joint(&p, &hyper);
    let b = run_joint(&p, &hyper);
    assert_eq!(a, b);
}
