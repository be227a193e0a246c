mod common;

use common::*;
use mpdt::data::{StateNorm, Trajectory};
use mpdt::envs::{Problem, TaskSpec};
use mpdt::model::{embed_segment, init_params};
use mpdt::prompts::{
    assemble, init_learned_prompt, make_task_prompt, sample_trajectory_prompt, PromptTag, PromptVariant, Z_NAMES,
};
use mpdt::Error;
use mpdt_tensor::{ParamStore, Tape};
use proptest::prelude::*;

fn pool(lengths: &[usize]) -> Vec<Trajectory> {
    lengths
        .iter()
        .enumerate()
        .map(|(j, &len)| {
            Trajectory::from_rollout(
                (0..len).map(|t| vec![j as f64, t as f64]).collect(),
                (0..len).map(|t| vec![0.1 * t as f64, -0.1]).collect(),
                vec![-1.0; len],
            )
        })
        .collect()
}

fn spec() -> TaskSpec {
    TaskSpec::new(Problem::PointReach, 3, vec![0.6, 0.8])
}

proptest! {
    #[test]
    fn prompt_length_formula(tag_index in 0usize..5, n in 0usize..20, j in 1usize..4, h in 1usize..6) {
        let tag = ALL_TAGS[tag_index];
        let variant = PromptVariant { tag, learned_len: n, traj_episodes: j, traj_seg_len: h };
        let expected = match tag {
            PromptTag::TaskLearned => 3 * (n + 1),
            PromptTag::Task => 3,
            PromptTag::PureLearned => 3 * n,
            PromptTag::Trajectory => 3 * h * j,
            PromptTag::None => 0,
        };
        match variant.validate() {
            Ok(()) => {
                prop_assert_eq!(variant.prompt_len(), expected);
                let mut r = rng(n as u64);
                let p = assemble(&variant, &spec(), &pool(&[8, 9]), &StateNorm::identity(2), &mut r).unwrap();
                prop_assert_eq!(p.len(), expected);
            }
            Err(_) => {
                let zero_for_learned = n == 0 && tag == PromptTag::PureLearned;
                let learned_on_plain = n > 0 && matches!(tag, PromptTag::Task | PromptTag::Trajectory | PromptTag::None);
                prop_assert!(zero_for_learned || learned_on_plain);
            }
        }
    }
}

#[test]
fn zero_length_only_for_task_variants() {
    assert!(PromptVariant::new(PromptTag::Task, 0).validate().is_ok());
    assert!(PromptVariant::new(PromptTag::TaskLearned, 0).validate().is_ok());
    assert!(matches!(PromptVariant::new(PromptTag::PureLearned, 0).validate(), Err(Error::Config(_))));
    assert!(matches!(PromptVariant::new(PromptTag::Task, 4).validate(), Err(Error::Config(_))));
    for name in ["task-learned", "task_learned", "task", "pure-learned", "trajectory", "none"] {
        assert!(name.parse::<PromptTag>().is_ok(), "{name}");
    }
    assert!("prompt-dt".parse::<PromptTag>().is_err());
}

#[test]
fn learned_prompt_initialization() {
    let mut store: ParamStore<f64> = ParamStore::new();
    init_learned_prompt(&mut store, 15, 128, 4).unwrap();
    assert_eq!(store.total_len(), 5760);
    for z in Z_NAMES {
        assert_eq!(store.require(z).unwrap().shape(), &[15, 128]);
    }
    let all: Vec<f64> = store.iter().flat_map(|(_, t)| t.values().to_vec()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    assert!(mean.abs() < 2e-3 && (std - 0.02).abs() < 2e-3, "mean {mean} std {std}");
    // blocks are drawn independently
    assert_ne!(store.require(Z_NAMES[0]).unwrap().values(), store.require(Z_NAMES[1]).unwrap().values());

    let mut again: ParamStore<f64> = ParamStore::new();
    init_learned_prompt(&mut again, 15, 128, 4).unwrap();
    assert_eq!(store.checksum(), again.checksum());

    let mut empty: ParamStore<f64> = ParamStore::new();
    init_learned_prompt(&mut empty, 0, 128, 4).unwrap();
    assert!(empty.is_empty());
}

#[test]
fn task_prompt_embeds_c_once() {
    let config = small_config(2);
    let variant = PromptVariant::new(PromptTag::Task, 0);
    let mut store: ParamStore<f64> = init_params(&config, &variant, 1).unwrap();
    let mut tape = Tape::new();
    let token = make_task_prompt(&mut tape, &store, &[&[1.0, 1.0], &[0.08, 0.0]]).unwrap();
    assert_eq!(tape.shape(token).unwrap(), &[2, 1, 16]);

    for v in store.get_mut("embed_param.weight").unwrap().values_mut() {
        *v = 0.0;
    }
    let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
    store.get_mut("embed_param.bias").unwrap().values_mut().copy_from_slice(&bias);
    let mut tape = Tape::new();
    let token = make_task_prompt(&mut tape, &store, &[&[3.0, -7.0]]).unwrap();
    assert_eq!(tape.value(token).unwrap(), bias.as_slice());

    assert!(matches!(make_task_prompt(&mut tape, &store, &[&[0.08]]), Err(Error::Contract(_))));
}

#[test]
fn three_c_tokens_are_identical_before_position_embedding() {
    for (tag, n) in [(PromptTag::Task, 0), (PromptTag::TaskLearned, 2)] {
        let config = mpdt::model::ModelConfig { prompt_pos_embedding: false, param_dim: 1, ..small_config(3) };
        let variant = PromptVariant::new(tag, n);
        let store: ParamStore<f64> = init_params(&config, &variant, 2).unwrap();
        let mut r = rng(0);
        let batch = batch_of(&[(random_window(&config, 3, 0, &mut r), prompt_for(&variant, &[0.08], &mut r, &config))]);
        let mut tape = Tape::new();
        let tokens = embed_segment(&mut tape, &store, &config, &batch).unwrap();
        let values = tape.value(tokens.embeddings).unwrap();
        let h = config.embed_dim;
        let c_positions: Vec<usize> =
            tokens.token_role.iter().enumerate().filter(|(_, r)| **r == mpdt::model::TokenRole::PromptC).map(|(i, _)| i).collect();
        assert_eq!(c_positions, (0..3).map(|i| n + i * (n + 1)).collect::<Vec<_>>());
        let token = |i: usize| &values[i * h..(i + 1) * h];
        assert_eq!(token(c_positions[0]), token(c_positions[1]));
        assert_eq!(token(c_positions[0]), token(c_positions[2]));
    }
}

#[test]
fn trajectory_prompt_sizes_and_sampling() {
    let norm = StateNorm::identity(2);
    let mut r = rng(5);
    assert_eq!(sample_trajectory_prompt(&pool(&[8, 8]), 1, 2, &norm, &mut r).unwrap().steps() * 3, 6);
    assert_eq!(sample_trajectory_prompt(&pool(&[8, 8]), 1, 5, &norm, &mut r).unwrap().steps() * 3, 15);

    let single = pool(&[6]);
    let first = sample_trajectory_prompt(&single, 2, 4, &norm, &mut r).unwrap();
    for _ in 0..5 {
        assert_eq!(sample_trajectory_prompt(&single, 2, 4, &norm, &mut r).unwrap(), first);
    }
    assert_eq!(first.timesteps, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    assert_eq!(first.rtg[0], -6.0);

    // short demonstrations are skipped
    let mixed = pool(&[2, 7, 1]);
    for _ in 0..20 {
        let p = sample_trajectory_prompt(&mixed, 1, 5, &norm, &mut r).unwrap();
        assert!(p.states.iter().all(|s| s[0] == 1.0));
    }

    assert!(matches!(sample_trajectory_prompt(&[], 1, 2, &norm, &mut r), Err(Error::Contract(_))));
    assert!(sample_trajectory_prompt(&pool(&[1, 1]), 1, 2, &norm, &mut r).is_err());
}

#[test]
fn assemble_per_variant() {
    let norm = StateNorm::identity(2);
    let demo = pool(&[10]);
    let mut r = rng(8);
    let none = assemble(&PromptVariant::new(PromptTag::None, 0), &spec(), &demo, &norm, &mut r).unwrap();
    assert!(none.is_empty());
    let pure = assemble(&PromptVariant::new(PromptTag::PureLearned, 15), &spec(), &demo, &norm, &mut r).unwrap();
    assert_eq!((pure.len(), pure.c.is_none(), pure.trajectory.is_none()), (45, true, true));
    let three_d = TaskSpec { c: vec![1.0, 2.0, 3.0], ..spec() };
    let tl = assemble(&PromptVariant::new(PromptTag::TaskLearned, 3), &three_d, &demo, &norm, &mut r).unwrap();
    assert_eq!((tl.len(), tl.c.as_deref()), (12, Some(&[1.0, 2.0, 3.0][..])));
    let traj = assemble(&PromptVariant::new(PromptTag::Trajectory, 0), &spec(), &demo, &norm, &mut r).unwrap();
    assert!(traj.c.is_none() && traj.n == 0 && traj.trajectory.is_some());
    assert!(matches!(
        assemble(&PromptVariant::new(PromptTag::Trajectory, 0), &spec(), &[], &norm, &mut r),
        Err(Error::Config(_))
    ));
}

#[test]
fn assemble_is_a_function_of_its_inputs() {
    let norm = StateNorm { mean: vec![1.0, 2.0], std: vec![2.0, 4.0] };
    let demo = pool(&[6, 7, 8, 9]);
    for tag in ALL_TAGS {
        let variant = variant_of(tag);
        let a = assemble(&variant, &spec(), &demo, &norm, &mut rng(42)).unwrap();
        let b = assemble(&variant, &spec(), &demo, &norm, &mut rng(42)).unwrap();
        assert_eq!(a, b);
    }
}
