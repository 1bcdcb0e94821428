use std::fs;
use std::path::{Path, PathBuf};

use mvinpaint::config::{PipelineConfig, Targets};
use mvinpaint::grid::Mask;
use mvinpaint::pipeline::{run, run_stage, Stage};
use mvinpaint::synth::{render_scene, write_scene, SceneParams};
use mvinpaint::Error;

/// Small synthetic sequence; frame 2 has its mask cleared.
fn scene(dir: &Path) {
    let mut s = render_scene(&SceneParams {
        width: 128,
        height: 96,
        frames: 12,
        focal: 104.0,
        ..SceneParams::default()
    });
    let f = &mut s.sequence.frames[2];
    f.mask = Mask::new(f.mask.width(), f.mask.height(), false);
    write_scene(dir, &s).unwrap();
}

fn config(data: &Path, out: &Path, targets: Vec<usize>) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        dataset: data.to_path_buf(),
        output: out.to_path_buf(),
        targets: Targets::Ids(targets),
        ..PipelineConfig::default()
    };
    cfg.set("candidates", "8").unwrap();
    cfg.set("selected", "4").unwrap();
    cfg.set("vocab_depth", "2").unwrap();
    cfg.validate().unwrap();
    cfg
}

fn outputs(out: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["color", "depth"] {
        let mut entries: Vec<PathBuf> = fs::read_dir(out.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let bytes = fs::read(&p).unwrap();
            files.push((p.strip_prefix(out).unwrap().to_path_buf(), bytes));
        }
    }
    files
}

#[test]
fn runs_are_reproducible_and_stages_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    scene(&data);

    let (a, b, staged) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("staged"));
    let report = run(&config(&data, &a, vec![6])).unwrap();
    assert_eq!(report.failed_masks(), 0);
    run(&config(&data, &b, vec![6])).unwrap();

    let cfg = config(&data, &staged, vec![6]);
    for stage in [Stage::Select, Stage::Warp, Stage::Combine, Stage::Color, Stage::Depth] {
        assert!(!run_stage(&cfg, stage).unwrap().is_empty());
    }

    let reference = outputs(&a);
    assert_eq!(reference.len(), 2);
    assert_eq!(reference, outputs(&b));
    assert_eq!(reference, outputs(&staged));
}

#[test]
fn frames_without_a_mask_are_copied_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    scene(&data);
    let out = tmp.path().join("out");
    let report = run(&config(&data, &out, vec![2])).unwrap();
    assert!(report.frames[0].noop);

    let stamp = &report.frames[0].stamp;
    let written = outputs(&out);
    let input_color = fs::read(data.join("rgb").join(format!("{stamp}.png"))).unwrap();
    let input_depth = fs::read(data.join("depth").join(format!("{stamp}.png"))).unwrap();
    assert_eq!(written[0].1, input_color);
    assert_eq!(written[1].1, input_depth);
}

#[test]
fn zero_selected_sources_is_a_config_error() {
    let mut cfg = PipelineConfig {
        dataset: PathBuf::from("unused"),
        ..PipelineConfig::default()
    };
    cfg.set("selected", "0").unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
}

#[test]
fn later_stage_without_artifacts_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    scene(&data);
    let cfg = config(&data, &tmp.path().join("out"), vec![6]);
    assert!(matches!(run_stage(&cfg, Stage::Combine), Err(Error::MissingArtifact(_))));
}
