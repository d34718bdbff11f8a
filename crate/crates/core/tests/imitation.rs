use taililc::ilc::{limit_policies, ExpertSettings, IlcDesign, IlcFilters};
use taililc::mlp::TrainConfig;
use taililc::plant::{build_controller, build_plant, ControllerConfig, LoopSet, ParasiticMode, PlantConfig};
use taililc::policies::{
    build_tail_policy, label_dataset, nn_ilc_build, EvalMember, Evaluation, Expert, ExpertBase, LatentDim, NnIlcConfig,
    Source, Split, TailConfig,
};
use taililc::setpoint::{build_class, split_class, ParameterGrid, TestSelector, TrajectoryClass};

fn plant() -> PlantConfig {
    PlantConfig { mass: 2.0, modes: vec![ParasiticMode { freq_hz: 60.0, damping: 0.03, gain: 0.25 }], ts: 1e-3 }
}

fn class() -> TrajectoryClass {
    let grid = ParameterGrid {
        displacement: vec![0.01, 0.0125, 0.015, 0.0175],
        v_max: vec![0.05, 0.065, 0.08],
        a_max: vec![2.0],
        j_max: vec![100.0],
        s_max: vec![5000.0],
    };
    build_class(&grid, 1e-3).unwrap()
}

fn expert(horizon: usize) -> Expert {
    let plant = plant();
    let p = build_plant(&plant).unwrap();
    let k = build_controller(&plant, &ControllerConfig::default()).unwrap();
    let loops = LoopSet::new(p, k, horizon).unwrap();
    let filters =
        IlcFilters::design(&loops, &IlcDesign { lambda: None, q_cutoff_hz: Some(100.0), learning_gain: None }).unwrap();
    Expert::new(loops, filters, ExpertSettings::default(), ExpertBase::MassFeedforward, plant.mass).unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, epochs, batch_size: 32, init_seed: 1, shuffle_seed: 2, ..Default::default() }
}

#[test]
fn labels_are_the_expert_fixed_points_and_parallel_safe() {
    let c = class();
    let e = expert(c.samples());
    let serial = label_dataset(&e, &c.members, &c.tuple_ids, 1).unwrap();
    let parallel = label_dataset(&e, &c.members, &c.tuple_ids, 4).unwrap();
    assert_eq!(serial.h_f.h, parallel.h_f.h);
    assert_eq!(serial.h_r.ids, c.tuple_ids);

    for (i, t) in c.members.iter().enumerate() {
        let free = e.free_error(t).unwrap();
        let (_, f_inf) = limit_policies(&free, e.loops.ilc_j(), &e.filters).unwrap();
        let gap = (serial.h_f.h.column(i) - &f_inf).norm() / f_inf.norm();
        assert!(gap < 1e-6, "member {i}: {gap}");
    }
}

#[test]
fn students_improve_on_mass_feedforward_for_unseen_references() {
    let c = class();
    let (train, test) = split_class(&c, &TestSelector::EveryNth(4)).unwrap();
    let e = expert(c.samples());
    let lab = label_dataset(&e, &train.members, &train.tuple_ids, 4).unwrap();

    let tail_cfg = TailConfig {
        latent: LatentDim::Full,
        encoder_latent: Some(LatentDim::Fixed { n_l: 4 }),
        hidden: vec![32, 32],
        train: train_cfg(2000),
        dpca: Default::default(),
    };
    let tail = build_tail_policy(&lab.h_r, &lab.h_f, &tail_cfg).unwrap().policy;
    let nn_cfg = NnIlcConfig { features: Default::default(), hidden: vec![6, 6], train: train_cfg(20) };
    let nn = nn_ilc_build(&train.members, &lab.h_f, e.loops.delay(), &nn_cfg).unwrap().policy;

    let stars: Vec<Vec<f64>> = lab.h_f.h.column_iter().map(|c| c.iter().copied().collect()).collect();
    let mut members = Vec::new();
    for (i, (t, &id)) in train.members.iter().zip(&train.tuple_ids).enumerate() {
        members.push(EvalMember { id, split: Split::Train, traj: t, f_star: Some(&stars[i]) });
    }
    for (t, &id) in test.members.iter().zip(&test.tuple_ids) {
        members.push(EvalMember { id, split: Split::Test, traj: t, f_star: None });
    }
    let sources = vec![Source::MassFf, Source::Expert, Source::TailMassFf, Source::NnIlcMassFf];
    let evaluation =
        Evaluation { expert: &e, tail: Some(&tail), nn_ilc: Some(&nn), sources, jobs: 4, keep_traces: false };
    let (report, timings) = evaluation.run(&members);

    assert_eq!(report.cells.len(), members.len() * 4);
    assert!(report.cells.iter().all(|c| c.error.is_none()));
    assert!(timings.tail_full.is_some() && timings.nn_ilc_full.is_some());

    let peak = |s, split| report.mean_peak(s, split).unwrap();
    assert!(peak(Source::Expert, Split::Train) < 0.1 * peak(Source::MassFf, Split::Train));
    assert!(peak(Source::TailMassFf, Split::Test) < peak(Source::MassFf, Split::Test));
    assert!(peak(Source::NnIlcMassFf, Split::Test) < peak(Source::MassFf, Split::Test));

    let terms = report.tail.as_ref().unwrap().terms_train.unwrap();
    assert!(terms.direct <= terms.term_nl + terms.term_mu + 1e-12);
}
