//! Trains the full chain on a synthetic corpus and prints dev metrics.
//!
//! `cargo run --release --example cascade -- [seed]`

use svpipe::corpus::synth_corpus;
use svpipe::e2e::train_joint_s2i_dplda;
use svpipe::pipeline::{stage_rng, Cascade, Settings};

fn main() -> svpipe::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let mut s = Settings::default();
    s.synth.seed = seed;
    let corpus = synth_corpus(&s.synth)?;
    let mut rng = stage_rng(seed, "cascade");

    let c = Cascade::train_ivector(&corpus, &s, &mut rng)?;
    let plda = c.plda_dev()?;
    let dplda = c.dplda_dev()?;
    println!(
        "PLDA   eer {:.4}  c_primary {:.4}",
        plda.eer, plda.c_primary
    );
    println!(
        "DPLDA  eer {:.4}  c_primary {:.4}  (l2 {:e})",
        dplda.eer, dplda.c_primary, c.dplda_l2
    );

    let f2s = c.train_f2s(&s, &mut rng)?;
    let pca = c.fit_pca(&s)?;
    let (s2i, _) = c.train_s2i(&pca, &s, &mut rng)?;
    let sys = c.assemble(f2s, pca, s2i, c.dplda.clone(), &s)?;
    let out = train_joint_s2i_dplda(
        &sys,
        &c.train.train_set(),
        &c.dev.dev_set(),
        &s.joint,
        &mut rng,
    )?;
    println!(
        "NN     eer {:.4}  c_primary {:.4}  (before joint training)",
        out.initial_dev.eer, out.initial_dev.c_primary
    );
    println!("epoch\tloss\teer\tc_primary\tlr");
    for l in &out.logs {
        println!("{l}");
    }
    println!("best epoch {}", out.best_epoch);
    Ok(())
}
