use mbse3_core::diffcore::ParamStore;
use mbse3_core::metrics::{instances_from_labels, segmentation_scores_from_labels};
use mbse3_core::model::{predict, ModelConfig};
use mbse3_core::pipeline::{evaluate_all, prepare_all};
use mbse3_core::scenegen::{generate_scene, load_scene, load_split, save_scene, scene_path, SceneSpec};
use mbse3_core::trainer::{flow_pseudo_labels, Trainer, TrainerConfig};

fn small_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.backbone.layer_dims = vec![8, 8];
    m.hidden = 16;
    m
}

#[test]
fn scenes_round_trip_and_load_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    for i in [3u64, 1, 2] {
        let s = generate_scene(&spec, i).unwrap();
        let path = scene_path(dir.path(), "train", &s.id);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        save_scene(&s, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), s);
    }
    let ids: Vec<String> = load_split(dir.path(), "train").unwrap().into_iter().map(|s| s.id).collect();
    assert_eq!(ids, ["s0-000001", "s0-000002", "s0-000003"]);
}

#[test]
fn saved_checkpoint_predicts_identically() {
    let model = small_model();
    let scenes = prepare_all((0..3).map(|i| generate_scene(&SceneSpec::default(), i).unwrap()).collect(), &model.backbone).unwrap();
    let cfg = TrainerConfig {
        epochs: 1,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(model.clone(), cfg, model.init_params(1).unwrap(), scenes.clone(), Vec::new()).unwrap();
    trainer.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    trainer.store().save(&path).unwrap();
    let loaded = ParamStore::load(&path).unwrap();
    for ps in &scenes {
        let flow = ps.noisy_flow().unwrap();
        let a = predict(trainer.store(), &model, &ps.k, &ps.l, flow).unwrap();
        let b = predict(&loaded, &model, &ps.k, &ps.l, flow).unwrap();
        assert_eq!(a.mask_k, b.mask_k);
        assert_eq!(a.motion_logits, b.motion_logits);
    }
    assert_eq!(
        evaluate_all(trainer.store(), &model, &scenes).unwrap(),
        evaluate_all(&loaded, &model, &scenes).unwrap()
    );
}

#[test]
fn flow_pseudo_labels_match_ground_truth_parts() {
    let spec = SceneSpec::default();
    let opts = TrainerConfig::default().ransac(8);
    let mut total = 0.0;
    let n = 10;
    for i in 0..n {
        let s = generate_scene(&spec, 500 + i).unwrap();
        let labels = flow_pseudo_labels(&s, &opts, 0, i).unwrap();
        let (eval, _) = segmentation_scores_from_labels(&labels, &instances_from_labels(&labels), &s.labels).unwrap();
        total += eval.ap;
    }
    let mean = total / n as f64;
    assert!(mean >= 0.9, "mean pseudo-label AP {mean}");
}
