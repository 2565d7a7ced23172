// Named to sort before the acceptance target: cargo stops at the first failing
// test binary, and a red criterion should not hide these.

use std::path::{Path, PathBuf};

use voltrain::adjoint::ParamStore;
use voltrain::camera::{sphere_views, Camera};
use voltrain::dvr::{backward, render, render_trace, RenderConfig, Scene};
use voltrain::grid::{save_volume, synth_volume, ScalarType, SceneRecipe};
use voltrain::image::ImageF;
use voltrain::loss::{combined_loss_grad, ssim, LossMode, SsimConfig};
use voltrain::math::Vec3;
use voltrain::tf::{ramp_bins, shells_bins, transparent_bins, LookupTF, TransferFunction, DEFAULT_KAPPA_MAX};
use voltrain::train::{
    adam_step, evaluate, make_dataset, train_on, AdamState, Checkpoint, Dataset, DatasetSpec, ModelKind, Sampling,
    Split, TrainConfig,
};

fn dataset(dir: &Path, dims: usize, res: usize, views: usize, splits: Vec<usize>) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let vol = synth_volume(&SceneRecipe::three_shells(), [dims; 3], [1.0; 3]).unwrap();
    let vpath = dir.join("vol.json");
    save_volume(&vol, &vpath, ScalarType::F32).unwrap();
    let tpath = dir.join("tf.json");
    TransferFunction::lookup(&shells_bins(), DEFAULT_KAPPA_MAX).unwrap().save(&tpath).unwrap();
    let mut spec = DatasetSpec::new(vpath, tpath, dir.join("ds"));
    spec.views = views;
    spec.splits = splits;
    spec.width = res;
    spec.height = res;
    spec.s_render = 1.0;
    make_dataset(&spec).unwrap().0
}

#[test]
fn train_evaluate_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dataset(dir.path(), 20, 20, 8, vec![5, 2, 1]);
    let ds = Dataset::load(&path).unwrap();
    let mut cfg = TrainConfig::new(ModelKind::Lookup, path, dir.path().join("run"));
    cfg.epochs = 12;
    cfg.sampling = Sampling::Fixed { s: 1.0 };
    let report = train_on(&cfg, &ds).unwrap();
    let first = report.history[0].val_ssim;
    assert!(report.best.val_ssim > first + 0.1, "{first} -> {}", report.best.val_ssim);

    let model = Checkpoint::load(&report.checkpoint).unwrap().to_model().unwrap();
    let val = evaluate(&model, &ds, Split::Val, 1.0).unwrap();
    // Validation at the training rate without jitter is exactly what was logged.
    assert!((val.mean_ssim - report.best.val_ssim).abs() < 1e-12);
    let test = evaluate(&model, &ds, Split::Test, 3.0).unwrap();
    assert_eq!(test.views.len(), 1);
    assert!(test.mean_ssim > 0.5);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let vol = synth_volume(&SceneRecipe::three_shells(), [24; 3], [1.0; 3]).unwrap();
    let mut store = ParamStore::new();
    let lut = LookupTF::register(&mut store, "lut", &ramp_bins(), DEFAULT_KAPPA_MAX).unwrap();
    let cam = sphere_views(3, 2.5, 1)[1];
    let mut cfg = RenderConfig::new(23, 17, 0.7);
    cfg.jitter = true;
    let target = ImageF::zeros(23, 17, 3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let p = lut.prepare(&store);
            let scene = Scene { features: &vol, classifier: &p, decoder: None };
            let img = render(&scene, &cam, &cfg, 5).unwrap();
            let trace = render_trace(&scene, &cam, &cfg, 5).unwrap();
            let mut d = vec![0.0; 23 * 17 * 3];
            combined_loss_grad(&trace.rgb, &target, LossMode::MseSsim, &SsimConfig::default(), &mut d).unwrap();
            let g = backward(&scene, &cfg, &trace, &d, store.len(), true).unwrap();
            (img, g)
        })
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn transparent_table_is_a_stationary_point() {
    let vol = synth_volume(&SceneRecipe::three_shells(), [16; 3], [1.0; 3]).unwrap();
    let mut store = ParamStore::new();
    let lut = LookupTF::register(&mut store, "lut", &transparent_bins(), DEFAULT_KAPPA_MAX).unwrap();
    let before = store.values().to_vec();
    let cams = sphere_views(4, 2.5, 0);
    let cfg = RenderConfig::new(12, 12, 1.0);
    let target = ImageF::zeros(12, 12, 3);
    let mut adam = AdamState::new(store.len());
    for step in 0..3 {
        for cam in &cams {
            let p = lut.prepare(&store);
            let scene = Scene { features: &vol, classifier: &p, decoder: None };
            let trace = render_trace(&scene, cam, &cfg, step).unwrap();
            let mut d = vec![0.0; 12 * 12 * 3];
            combined_loss_grad(&trace.rgb, &target, LossMode::MseSsim, &SsimConfig::default(), &mut d).unwrap();
            let mut g = vec![0.0; store.len()];
            backward(&scene, &cfg, &trace, &d, store.len(), false).unwrap().apply(&p, &mut g);
            assert!(g.iter().all(|&x| x == 0.0));
            store.accumulate(&g);
        }
        adam_step(&mut adam, &mut store, 0.3);
    }
    assert_eq!(store.values(), &before[..]);
}

#[test]
fn higher_resolution_renders_agree_after_downsampling() {
    let vol = synth_volume(&SceneRecipe::three_shells(), [32; 3], [1.0; 3]).unwrap();
    let mut store = ParamStore::new();
    let lut = LookupTF::register(&mut store, "lut", &shells_bins(), DEFAULT_KAPPA_MAX).unwrap();
    let p = lut.prepare(&store);
    let scene = Scene { features: &vol, classifier: &p, decoder: None };
    let cam = Camera::look_at(Vec3::new(1.2, 0.9, 1.9), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0));
    let low = render(&scene, &cam, &RenderConfig::new(32, 32, 2.0), 0).unwrap();
    let high = render(&scene, &cam, &RenderConfig::new(96, 96, 2.0), 0).unwrap();
    let down = high.downsample(3).unwrap();
    let s = ssim(&down.take_channels(3).unwrap(), &low.take_channels(3).unwrap(), &SsimConfig::default()).unwrap();
    assert!(s > 0.9, "{s}");
}
