//! Training driver shared by `pretrain` and `finetune`: weights come from a
//! fresh init, an initial checkpoint, or a resumed run, and every invocation
//! leaves a self-describing run directory behind.

use std::fs::File;
use std::io::{BufWriter, Write};

use anyhow::{bail, Context, Result};
use turnforge_core::model::{load_checkpoint, save_checkpoint, Parameters};
use turnforge_core::objectives::shard::read_shard;
use turnforge_core::training::{run_stage, Stage, TrainState};

use crate::config::load_config;
use crate::manifest::{create_run_dir, CheckpointRef, RunManifest};
use crate::{effective_seed, TrainArgs};

pub fn run(args: &TrainArgs, finetune: bool) -> Result<()> {
    let (mut cfg, cfg_text) = load_config(&args.config)?;
    cfg.train.seed = effective_seed(cfg.train.seed);
    let command = if finetune { "finetune" } else { "pretrain" };
    if finetune {
        if cfg.train.stage != Stage::Finetune {
            bail!("finetune requires [train].stage = \"finetune\"");
        }
        if args.init_ckpt.is_none() && args.resume.is_none() {
            bail!("finetune requires --init-ckpt (or --resume of a finetune run)");
        }
    } else if cfg.train.stage == Stage::Finetune {
        bail!("pretrain cannot run stage \"finetune\"; use the finetune command");
    }

    create_run_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new(command, cfg.train.seed);
    manifest.input("config", &args.config);
    manifest.input("shard", &args.shard);
    manifest.write(&args.out_dir)?;
    std::fs::write(args.out_dir.join("config.toml"), &cfg_text)
        .context("snapshot config.toml")?;

    let examples = read_shard(&args.shard)
        .with_context(|| format!("read shard {}", args.shard.display()))?;

    // Weight source: resumed run > initial checkpoint > fresh init.
    let (params, resume_state) = if let Some(prev_dir) = &args.resume {
        let prefix = prev_dir.join("final");
        let ckpt = load_checkpoint::<f64>(&prefix)
            .with_context(|| format!("load resume checkpoint {}", prefix.display()))?;
        if ckpt.seed != cfg.train.seed {
            bail!(
                "resumed run was seeded with {} but the config says {}",
                ckpt.seed,
                cfg.train.seed
            );
        }
        let (step, seed) = (ckpt.step, ckpt.seed);
        let (params, extras) = ckpt.into_parts().context("split resume checkpoint")?;
        params
            .config()
            .assert_compatible(&cfg.model)
            .context("resume checkpoint disagrees with [model]")?;
        let state = TrainState::from_extras(&params, &extras, step, seed)
            .context("restore optimizer state")?;
        manifest.resumed_from = Some(prev_dir.display().to_string());
        (params, Some(state))
    } else if let Some(init) = &args.init_ckpt {
        let ckpt = load_checkpoint::<f64>(init)
            .with_context(|| format!("load initial checkpoint {}", init.display()))?;
        let init_step = ckpt.step;
        let (mut params, _extras) = ckpt.into_parts().context("split initial checkpoint")?;
        if finetune
            && (cfg.model.max_positions_enc > params.config().max_positions_enc
                || cfg.model.max_positions_dec > params.config().max_positions_dec)
        {
            params
                .extend_positions(cfg.model.max_positions_enc, cfg.model.max_positions_dec)
                .context("extend position tables")?;
        }
        params
            .config()
            .assert_compatible(&cfg.model)
            .context("initial checkpoint disagrees with [model]")?;
        manifest.init_checkpoint = Some(CheckpointRef {
            path: init.display().to_string(),
            step: init_step,
        });
        (params, None)
    } else {
        (
            Parameters::<f64>::init(cfg.model.clone(), cfg.train.seed)
                .context("initialize parameters")?,
            None,
        )
    };
    manifest.write(&args.out_dir)?;

    let outcome = run_stage(params, &examples, &cfg.train, resume_state, args.stop_after_steps)
        .context("training failed")?;

    let mut steps_file =
        BufWriter::new(File::create(args.out_dir.join("steps.jsonl")).context("steps.jsonl")?);
    for record in &outcome.steps {
        writeln!(steps_file, "{}", serde_json::to_string(record)?)?;
    }
    steps_file.flush()?;
    let mut epochs_file =
        BufWriter::new(File::create(args.out_dir.join("epochs.jsonl")).context("epochs.jsonl")?);
    for record in &outcome.epochs {
        writeln!(epochs_file, "{}", serde_json::to_string(record)?)?;
    }
    epochs_file.flush()?;

    let ckpt_prefix = args.out_dir.join("final");
    save_checkpoint(
        &ckpt_prefix,
        &outcome.params,
        outcome.state.step,
        cfg.train.seed,
        &outcome.state.to_extras(),
    )
    .context("save final checkpoint")?;

    manifest.detail("examples", examples.len());
    manifest.detail("final_step", outcome.state.step);
    manifest.detail("stopped_early", outcome.stopped_early);
    if let Some(last) = outcome.steps.last() {
        manifest.detail("final_l_gen", last.l_gen);
        if let Some(l) = last.l_turn {
            manifest.detail("final_l_turn", l);
        }
        if let Some(l) = last.l_mlm {
            manifest.detail("final_l_mlm", l);
        }
        manifest.detail("final_beta", last.beta);
    }
    manifest.finalize(
        &args.out_dir,
        vec![
            "config.toml".into(),
            "steps.jsonl".into(),
            "epochs.jsonl".into(),
            "final.manifest".into(),
            "final.blob".into(),
        ],
    )?;

    let last_gen = outcome.steps.last().map(|s| s.l_gen).unwrap_or(f64::NAN);
    println!(
        "{command} reached step {} (stopped early: {}); final l_gen {:.4}; checkpoint {}",
        outcome.state.step,
        outcome.stopped_early,
        last_gen,
        ckpt_prefix.display()
    );
    Ok(())
}
