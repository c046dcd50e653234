use std::path::{Path, PathBuf};

use relcorr::checkpoint::Checkpoint;
use relcorr::commands::restore;
use relcorr::config::RunConfig;
use relcorr::synth::gen_synthetic;
use relcorr::train::{train_command, LOG_FILE, LOG_HEADER};
use relcorr::CliError;

const TINY: &str = "\
backbone.channels = 8,8
backbone.pool = 2,2
backbone.input_size = 16
scr.du = 1
scr.dv = 1
scr.c_prime = 4
cca.c_prime = 4
cca.c_l = 2
train.dataset = data/manifest.json
train.steps_per_epoch = 3
train.decay_epochs = 2
train.way = 3
train.shot = 1
train.query = 2
train.anchor_batch = independent:4
train.seed = 11
eval.way = 3
eval.query = 2
eval.episodes = 4
";

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(&dir.path().join("data"), 8, 6, 16, 2).unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    (dir, path)
}

fn log(out: &Path) -> String {
    std::fs::read_to_string(out.join(LOG_FILE)).unwrap()
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_log() {
    let (dir, _) = setup("");
    let write = |name: &str, body: String| {
        let p = dir.path().join(name);
        std::fs::write(&p, format!("{TINY}{body}")).unwrap();
        RunConfig::load(&p).unwrap()
    };
    let full = write("full.cfg", "train.epochs = 3\ntrain.out = full\n".into());
    train_command(&full, None).unwrap();
    let part = write("part.cfg", "train.epochs = 1\ntrain.out = part\n".into());
    train_command(&part, None).unwrap();
    let rest = write("rest.cfg", "train.epochs = 3\ntrain.out = part\n".into());
    let last = train_command(&rest, Some(&dir.path().join("part/epoch_001"))).unwrap();
    assert!(last.ends_with("epoch_003"));
    let (a, b) = (log(&dir.path().join("full")), log(&dir.path().join("part")));
    assert_eq!(a.lines().count(), 1 + 3 * 3);
    assert_eq!(a, b);
    let (ca, cb) = (Checkpoint::load(&dir.path().join("full")).unwrap(), Checkpoint::load(&dir.path().join("part")).unwrap());
    assert_eq!(ca.epoch, 3);
    assert_eq!(ca.params.tensors(), cb.params.tensors());
    assert_eq!(ca.velocity.tensors(), cb.velocity.tensors());
    assert_eq!(ca.buffers.tensors(), cb.buffers.tensors());
}

#[test]
fn log_has_the_documented_columns() {
    let (_dir, path) = setup("train.epochs = 1\ntrain.out = out\n");
    let cfg = RunConfig::load(&path).unwrap();
    train_command(&cfg, None).unwrap();
    let text = log(&path.parent().unwrap().join("out"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    for (step, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 6);
        assert_eq!((f[0], f[1].parse::<usize>().unwrap()), ("0", step));
        assert_eq!(f[5].parse::<f64>().unwrap(), 0.1);
        assert!(f[2..5].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn zero_lambda_optimizes_the_anchor_loss_alone() {
    let (_dir, path) = setup("train.epochs = 1\ntrain.out = out\nloss.lambda = 0\n");
    let cfg = RunConfig::load(&path).unwrap();
    train_command(&cfg, None).unwrap();
    let text = log(&path.parent().unwrap().join("out"));
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!(f[1] > 0.0, "metric column still reported");
        assert_eq!(f[2], f[0]);
    }
}

#[test]
fn checkpoint_round_trips_and_rejects_other_shapes() {
    let (dir, path) = setup("train.epochs = 1\ntrain.out = out\n");
    let cfg = RunConfig::load(&path).unwrap();
    let last = train_command(&cfg, None).unwrap();
    let ckpt = Checkpoint::load(&last).unwrap();
    let model = restore(&cfg, &ckpt).unwrap();
    assert_eq!(model.params.tensors(), ckpt.params.tensors());
    assert_eq!(ckpt.config.entries(), cfg.entries());
    let other = RunConfig::parse(&format!("{TINY}backbone.channels = 8,12\n")).unwrap();
    assert!(matches!(restore(&other, &ckpt), Err(CliError::Checkpoint(_))));
    let vanilla = RunConfig::parse(&format!("{TINY}cca.kernel = vanilla\n")).unwrap();
    assert!(matches!(restore(&vanilla, &ckpt), Err(CliError::Checkpoint(_))));
    assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
}
