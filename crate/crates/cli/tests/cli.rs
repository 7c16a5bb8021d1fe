use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voxkit::audio::{read_wav, write_wav, AudioBuffer};
use voxkit::featfile::FeatureMatrix;
use voxkit::fit::eval_report;
use voxkit::net::{Checkpoint, NetShape, NetWeights};

fn cli(args: &[&str], paths: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddsp-voxkit"))
        .args(args)
        .args(paths)
        .env_remove("DDSP_TEST_F64")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tone(path: &Path, freq: f64, secs: f64) -> PathBuf {
    let len = (16000.0 * secs) as usize;
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / 16000.0;
            0.4 * (2.0 * PI * freq * t).sin() + 0.1 * (4.0 * PI * freq * t).sin()
        })
        .collect();
    write_wav(path, &AudioBuffer::new(samples, 16000)).unwrap();
    path.to_path_buf()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.ini");
    std::fs::write(&path, "[fit]\nchannels = 16\nblocks = 2\nslice_frames = 0\n").unwrap();
    path
}

#[test]
fn analyze_writes_features() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("sine.wav"), 200.0, 1.0);
    let out = dir.path().join("feat");
    let o = cli(&["analyze", "--out", out.to_str().unwrap()], &[&wav]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "frames 97");
    let mel = FeatureMatrix::read(out.join("mel.feat")).unwrap();
    assert_eq!((mel.frames, mel.dim), (97, 80));
    let f0 = FeatureMatrix::read(out.join("f0.feat")).unwrap();
    assert_eq!((f0.frames, f0.dim), (97, 2));
    let mut voiced: Vec<f32> = f0.values.chunks(2).filter(|r| r[1] == 1.0).map(|r| r[0]).collect();
    voiced.sort_by(f32::total_cmp);
    let median = voiced[voiced.len() / 2];
    assert!((198.0..=202.0).contains(&median), "{median}");
}

#[test]
fn analyze_silence_sits_on_the_floor() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("silence.wav");
    write_wav(&wav, &AudioBuffer::silence(16000, 16000)).unwrap();
    let o = cli(&["analyze", "--out", dir.path().to_str().unwrap()], &[&wav]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mel = FeatureMatrix::read(dir.path().join("mel.feat")).unwrap();
    assert!(mel.values.iter().all(|&v| v == (1e-5f64).ln() as f32));
}

#[test]
fn unreadable_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav file at all").unwrap();
    let o = cli(&["analyze", "--out", dir.path().to_str().unwrap()], &[&junk]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).is_empty());
    let o = cli(&["analyze"], &[&dir.path().join("missing.wav")]);
    assert_eq!(o.status.code(), Some(2));
    let o = cli(&["analyze"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("t.wav"), 150.0, 1.0);
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[fit]\nlearnrate = 3\n").unwrap();
    let o = cli(&["fit", "--config", cfg.to_str().unwrap()], &[&wav]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnrate"), "{}", stderr(&o));
}

#[test]
fn zero_step_fit_writes_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("t.wav"), 150.0, 1.0);
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = cli(
        &["fit", "--steps", "0", "--seed", "4", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[&wav],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap(), "step,unscaled_mel_l1\n");
    let ck = Checkpoint::load(out.join("weights.ckpt")).unwrap();
    let init = NetWeights::init(NetShape { channels: 16, blocks: 2 }, 4);
    assert_eq!(ck.phase_seed, 4);
    for ((_, a), (_, b)) in ck.weights.iter().zip(init.iter()) {
        let rounded: Vec<f64> = b.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(a.data(), &rounded[..]);
    }
    assert_eq!(read_wav(out.join("y_dsp.wav")).unwrap().len(), 16000);
}

#[test]
fn short_audio_fit_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("t.wav"), 150.0, 0.3);
    let o = cli(&["fit", "--steps", "1", "--out", dir.path().to_str().unwrap()], &[&wav]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_synth_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("t.wav"), 150.0, 1.0);
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = cli(
        &["fit", "--steps", "30", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[&wav],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    let fit_txt = std::fs::read_to_string(out.join("fit.txt")).unwrap();
    let final_loss: f64 = fit_txt
        .lines()
        .find_map(|l| l.strip_prefix("final_mel_l1="))
        .unwrap()
        .parse()
        .unwrap();

    let regen = dir.path().join("regen.wav");
    let o = cli(&["synth", "--seed", "9"], &[&out.join("weights.ckpt"), &wav, &regen]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cli(&["eval", "--out", dir.path().to_str().unwrap()], &[&wav, &regen]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    let expected = eval_report(&read_wav(&wav).unwrap(), &read_wav(&regen).unwrap()).unwrap();
    assert_eq!(metrics, expected.to_kv());
    assert!(expected.mel_l1 < final_loss + 0.05, "{} vs {final_loss}", expected.mel_l1);
}

#[test]
fn eval_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("t.wav"), 180.0, 1.0);
    let o = cli(&["eval", "--out", dir.path().to_str().unwrap()], &[&wav, &wav]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.contains("f0_pcc=1\n"), "{metrics}");
    assert!(metrics.contains("mel_l1=0\n"), "{metrics}");
    assert!(metrics.contains("voicing_agreement=1\n"), "{metrics}");
}

#[test]
fn eval_duration_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let a = tone(&dir.path().join("a.wav"), 180.0, 1.0);
    let b = tone(&dir.path().join("b.wav"), 180.0, 2.0);
    let o = cli(&["eval", "--out", dir.path().to_str().unwrap()], &[&a, &b]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn checkpoint_with_biases(path: &Path, amp: f64, noise: f64) {
    let mut weights = NetWeights::zeros(NetShape { channels: 8, blocks: 1 });
    weights.get_mut("head.amp.bias").unwrap().data_mut().fill(amp);
    weights.get_mut("head.noise.bias").unwrap().data_mut().fill(noise);
    Checkpoint { weights, phase_seed: 1 }.save(path).unwrap();
}

#[test]
fn synth_seed_only_moves_the_noise() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("t.wav"), 160.0, 1.0);
    let render = |ckpt: &Path, seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = cli(&["synth", "--seed", seed], &[ckpt, &wav, &out]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    let harmonic = dir.path().join("harmonic.ckpt");
    checkpoint_with_biases(&harmonic, 0.0, -60.0);
    let (h1, h2) = (render(&harmonic, "1", "h1.wav"), render(&harmonic, "2", "h2.wav"));
    // the noise branch bottoms out at 1e-7 and can flip a rounding, nothing more
    let pcm = |b: &[u8]| -> Vec<i16> { b[44..].chunks(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect() };
    assert_eq!(h1.len(), h2.len());
    assert!(pcm(&h1).iter().zip(pcm(&h2)).all(|(a, b)| (a - b).abs() <= 1));
    assert!(pcm(&h1).iter().any(|&v| v.abs() > 1000));
    let noisy = dir.path().join("noisy.ckpt");
    checkpoint_with_biases(&noisy, -60.0, 0.0);
    let n1 = render(&noisy, "1", "n1.wav");
    assert_eq!(n1, render(&noisy, "1", "n1b.wav"));
    assert_ne!(n1, render(&noisy, "2", "n2.wav"));
}

#[test]
fn zero_weight_checkpoint_renders_a_steady_signal() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("t.wav"), 160.0, 1.0);
    let ckpt = dir.path().join("zero.ckpt");
    Checkpoint {
        weights: NetWeights::zeros(NetShape::default()),
        phase_seed: 0,
    }
    .save(&ckpt)
    .unwrap();
    let out = dir.path().join("z.wav");
    let o = cli(&["synth"], &[&ckpt, &wav, &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let y = read_wav(&out).unwrap();
    // frame energies over the rendered span stay within a narrow band
    let energies: Vec<f64> = y.samples[1000..15000]
        .chunks(1600)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64)
        .collect();
    let (lo, hi) = energies.iter().fold((f64::MAX, 0.0f64), |(l, h), &e| (l.min(e), h.max(e)));
    assert!(hi / lo < 1.5, "{energies:?}");
}

#[test]
fn f64_mode_fits() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone(&dir.path().join("t.wav"), 150.0, 1.0);
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_ddsp-voxkit"))
        .args(["fit", "--steps", "3", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .arg(&wav)
        .env("DDSP_TEST_F64", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v.is_finite());
    }
}
