//! Configuration, dataset synthesis, tensor files, image export and the
//! subcommands that drive every stage.
//!
//! A run directory holds one subdirectory per artifact, each with a
//! `manifest.txt` recording the config hash and seeds:
//!
//! ```text
//! <out>/config.txt        canonical copy of the config
//! <out>/dataset/          train.tns, test.tns, masks.tns
//! <out>/score/            checkpoint.tns, loss.csv
//! <out>/pairs/            pairs.tns (teacher pairs, cached)
//! <out>/distill/          checkpoint.tns, loss.csv, direct.tns
//! <out>/postproc/         checkpoint.tns, loss.csv, no_proxy.tns, masked.tns
//! <out>/infer/<input>/    PGM images, images.tns, sinograms.tns
//! <out>/eval/             comparison.csv, ablations.csv
//! ```

mod commands;
mod config;
mod container;
mod io;

pub use commands::{
    cmd_eval, cmd_gen_dataset, cmd_infer, cmd_train, load_dataset, load_pipeline, params_from_container,
    params_to_container, CommandOptions, Dataset, DatasetSummary, EvalSummary, InferSummary, TrainSummary, Workspace,
};
pub use config::RunConfig;
pub use container::{Tensor, TensorContainer, MAGIC};
pub use io::{hu_to_unit, pgm_bytes, read_raw_slice, resample, write_atomic, write_pgm, Manifest, HU_WINDOW};
