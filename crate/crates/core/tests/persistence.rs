mod common;

use std::path::Path;
use std::process::{Command, Stdio};

use common::*;
use svpipe::config::Config;
use svpipe::corpus::{synth_corpus, Corpus, Split};
use svpipe::dplda::DpldaParams;
use svpipe::e2e::E2eSystem;
use svpipe::f2s::F2sNet;
use svpipe::frontend::FeatureMatrix;
use svpipe::gmm::DiagGmm;
use svpipe::io::{encode_container, read_features, read_scores, write_features};
use svpipe::ivector::{IvecPrep, TvModel};
use svpipe::persist::{load_model, save_model, to_tensors, Persist};
use svpipe::pipeline::{plda_metrics, Settings};
use svpipe::plda::{to_dplda, TwoCovPlda};
use svpipe::s2i::{PcaModel, S2iNet};
use svpipe::stages::{self, Context, System};

pub const SMALL: &str = "
synth.n_speakers=12
synth.utts_per_speaker=6
synth.min_frames=100
synth.max_frames=200
ubm.components=8
ubm.iterations=4
tv.rank=10
tv.iterations=3
lda.dim=4
plda.iterations=5
dplda.l2_grid=1e-4,1e-3
f2s.hidden=16
f2s.epochs=2
pca.dim=20
s2i.hidden=16
s2i.epochs=5
joint.epochs=1
joint.epoch_batches=3
joint.n_pairs=4
e2e.epochs=1
e2e.epoch_batches=2
e2e.n_pairs=3
";

fn context(dir: &Path) -> Context {
    let mut c = Config::parse(SMALL).unwrap();
    c.set("paths.workdir", dir.display());
    Context::new(Settings::from_config(&c).unwrap(), 5)
}

fn run_all(ctx: &Context) {
    stages::synth_data(ctx).unwrap();
    stages::train_ubm_stage(ctx).unwrap();
    stages::extract_stats_stage(ctx).unwrap();
    stages::train_tv_stage(ctx).unwrap();
    stages::extract_ivec_stage(ctx).unwrap();
    stages::train_plda_stage(ctx).unwrap();
    stages::train_dplda_stage(ctx).unwrap();
    stages::train_f2s_stage(ctx).unwrap();
    stages::fit_pca_stage(ctx).unwrap();
    stages::train_s2i_stage(ctx).unwrap();
    stages::train_joint_stage(ctx).unwrap();
    stages::train_e2e_stage(ctx).unwrap();
}

fn bits<T: Persist>(m: &T) -> Vec<u8> {
    encode_container(&to_tensors(m).unwrap())
}

fn roundtrip_bits<T: Persist>(ctx: &Context, name: &str, tmp: &Path) {
    let m: T = load_model(&ctx.layout.model(name)).unwrap();
    let p = tmp.join(format!("{name}.again.svm"));
    save_model(&p, &m).unwrap();
    let again: T = load_model(&p).unwrap();
    assert_eq!(bits(&m), bits(&again), "{name}");
    assert_eq!(
        std::fs::read(&p).unwrap(),
        std::fs::read(ctx.layout.model(name)).unwrap(),
        "{name}"
    );
}

#[test]
fn stage_cascade_runs_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path());
    run_all(&ctx);

    roundtrip_bits::<DiagGmm>(&ctx, "ubm", dir.path());
    roundtrip_bits::<TvModel>(&ctx, "tv", dir.path());
    roundtrip_bits::<IvecPrep>(&ctx, "prep", dir.path());
    roundtrip_bits::<TwoCovPlda>(&ctx, "plda", dir.path());
    roundtrip_bits::<DpldaParams>(&ctx, "dplda", dir.path());
    roundtrip_bits::<F2sNet>(&ctx, "f2s", dir.path());
    roundtrip_bits::<PcaModel>(&ctx, "pca", dir.path());
    roundtrip_bits::<S2iNet>(&ctx, "s2i", dir.path());
    roundtrip_bits::<E2eSystem>(&ctx, "joint", dir.path());
    roundtrip_bits::<E2eSystem>(&ctx, "e2e", dir.path());

    let trials = ctx.layout.trials(Split::Dev);
    for system in [System::Plda, System::Dplda, System::Joint, System::E2e] {
        let first = stages::score_stage(&ctx, system, &trials, None).unwrap();
        let path = ctx.layout.scores(system, &trials);
        let bytes = std::fs::read(&path).unwrap();
        let again = stages::score_stage(&ctx, system, &trials, None).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
        assert_eq!(first, again);
        let parsed = read_scores(&path).unwrap();
        assert!(parsed
            .iter()
            .zip(&first)
            .all(|(a, b)| a.score.to_bits() == b.score.to_bits()));
        let out = dir.path().join(format!("{}.txt", system.name()));
        let report = stages::eval_stage(&path, &trials, Some(&out)).unwrap();
        assert!(report.eer >= 0.0 && report.eer <= 1.0);
        let kv = std::fs::read_to_string(out.with_extension("kv")).unwrap();
        assert!(kv.contains("c_primary="));
    }
}

#[test]
fn converted_plda_scores_survive_a_file_round_trip() {
    let mut g = rng(9);
    let d = 5;
    let m = TwoCovPlda::new(
        normal_vector(d, &mut g),
        random_spd(d, 0.1, &mut g),
        random_spd(d, 0.5, &mut g),
    )
    .unwrap();
    let p = to_dplda(&m).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dplda.svm");
    save_model(&path, &p).unwrap();
    let back: DpldaParams = load_model(&path).unwrap();
    for _ in 0..50 {
        let (a, b) = (normal_vector(d, &mut g), normal_vector(d, &mut g));
        assert_eq!(
            p.score(&a.view(), &b.view()).unwrap().to_bits(),
            back.score(&a.view(), &b.view()).unwrap().to_bits()
        );
    }
}

#[test]
fn features_and_corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = rng(4);
    let x = normal_matrix(37, 6, &mut g).mapv(|v| v as f32 as f64);
    let f = FeatureMatrix::new(x, 100.0).unwrap();
    let p = dir.path().join("a.svf");
    write_features(&p, &f).unwrap();
    assert_eq!(read_features(&p).unwrap().frames, f.frames);

    let mut c = Config::parse(SMALL).unwrap();
    c.set("synth.n_speakers", 5);
    let corpus = synth_corpus(&Settings::from_config(&c).unwrap().synth).unwrap();
    corpus.write(dir.path()).unwrap();
    assert_eq!(Corpus::read(dir.path()).unwrap(), corpus);
}

#[test]
fn in_memory_scores_match_the_file_route() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path());
    stages::synth_data(&ctx).unwrap();
    stages::train_ubm_stage(&ctx).unwrap();
    stages::extract_stats_stage(&ctx).unwrap();
    stages::train_tv_stage(&ctx).unwrap();
    stages::extract_ivec_stage(&ctx).unwrap();
    let plda = stages::train_plda_stage(&ctx).unwrap();
    let trials = ctx.layout.trials(Split::Dev);
    let lines = stages::score_stage(&ctx, System::Plda, &trials, None).unwrap();
    let report =
        stages::eval_stage(&ctx.layout.scores(System::Plda, &trials), &trials, None).unwrap();

    // the same i-vectors scored without going through the score files
    let corpus = Corpus::read(&ctx.layout.corpus()).unwrap();
    let ubm: DiagGmm = load_model(&ctx.layout.model("ubm")).unwrap();
    let tv: TvModel = load_model(&ctx.layout.model("tv")).unwrap();
    let prep: IvecPrep = load_model(&ctx.layout.model("prep")).unwrap();
    let dev =
        svpipe::pipeline::SplitData::new(&corpus, Split::Dev, &ctx.settings.frontend).unwrap();
    let stats = svpipe::pipeline::ubm_stats(&ubm, &dev).unwrap();
    let raw = svpipe::pipeline::extract_ivectors(&tv, &ubm, &stats).unwrap();
    let emb = prep.apply_rows(&raw.view()).unwrap();
    let direct = plda_metrics(&plda, &emb, &dev.all_pairs()).unwrap();
    assert_eq!(direct, report);
    assert_eq!(lines.len(), dev.all_pairs().len());
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_svpipe"));
    c.env("RUST_LOG", "off").stderr(Stdio::null());
    c
}

#[test]
fn command_line_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("desk.cfg");
    std::fs::write(
        &cfg,
        format!(
            "{SMALL}\npaths.workdir={}\n",
            dir.path().join("w").display()
        ),
    )
    .unwrap();

    assert_eq!(bin().arg("no-such-stage").status().unwrap().code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "ubm.components=many\n").unwrap();
    assert_eq!(
        bin()
            .args(["--config"])
            .arg(&bad)
            .arg("synth-data")
            .status()
            .unwrap()
            .code(),
        Some(2)
    );
    assert_eq!(
        bin()
            .arg("--config")
            .arg(&cfg)
            .arg("train-tv")
            .status()
            .unwrap()
            .code(),
        Some(3)
    );

    for stage in [
        "synth-data",
        "train-ubm",
        "extract-stats",
        "train-tv",
        "extract-ivec",
        "train-plda",
    ] {
        let st = bin()
            .arg("--config")
            .arg(&cfg)
            .args(["--threads", "2"])
            .arg(stage)
            .status()
            .unwrap();
        assert!(st.success(), "{stage}");
    }
    let trials = dir.path().join("w/trials/dev.trials");
    let scores = dir.path().join("plda.scores");
    let st = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["score", "--system", "plda", "--trials"])
        .arg(&trials)
        .arg("--out")
        .arg(&scores)
        .status()
        .unwrap();
    assert!(st.success());
    let out = bin()
        .arg("eval")
        .arg("--scores")
        .arg(&scores)
        .arg("--trials")
        .arg(&trials)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("C_primary"));

    let corrupt = dir.path().join("corrupt.scores");
    std::fs::write(&corrupt, "a b notanumber\n").unwrap();
    let st = bin()
        .arg("eval")
        .arg("--scores")
        .arg(&corrupt)
        .arg("--trials")
        .arg(&trials)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}
