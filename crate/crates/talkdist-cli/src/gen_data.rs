//! Materialize task splits as columnar text files for inspection.

use talkdist::config::{DataKind, ExperimentConfig};
use talkdist::data::{gen_synthetic, ingest_movielens, make_tasks, write_dense_task, write_sparse_task};
use talkdist::error::Result;

use crate::common;

pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    common::prepare_out_dir(&cfg.out, force)?;
    cfg.write_resolved(&cfg.out.join("resolved.config"))?;
    match cfg.data_kind {
        DataKind::Synthetic => {
            let (pretrain, downstream) = gen_synthetic(&cfg.synthetic)?;
            write_dense_task(&cfg.out, "pretrain", &pretrain)?;
            write_dense_task(&cfg.out, "downstream", &downstream)?;
            println!(
                "gen-data done: synthetic pretrain {} train / {} eval, downstream {} train / {} eval -> {}",
                pretrain.train_len(),
                pretrain.eval_len(),
                downstream.train_len(),
                downstream.eval_len(),
                cfg.out.display()
            );
        }
        DataKind::MovieLens => {
            let dir = common::movielens_dir(cfg);
            let corpus = ingest_movielens(&dir)?;
            for w in &corpus.warnings {
                eprintln!("warning: {w}");
            }
            let (pretrain, downstream, _) = make_tasks(&corpus, cfg.min_eval, cfg.max_genres)?;
            write_sparse_task(&cfg.out, &corpus, &pretrain)?;
            for task in &downstream {
                write_sparse_task(&cfg.out, &corpus, task)?;
            }
            println!(
                "gen-data done: pretrain plus {} genre tasks -> {}",
                downstream.len(),
                cfg.out.display()
            );
        }
    }
    Ok(())
}
