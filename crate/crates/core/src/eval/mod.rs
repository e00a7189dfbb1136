//! Metrics, classical baselines and the experiment harness.

mod harness;
mod metrics;
mod tv;

pub use metrics::{
    cap_psnr, proxy_distance, psnr, psnr_masked, ssim, MetricReport, PSNR_CAP_DB, SSIM_K1, SSIM_K2, SSIM_SIGMA,
    SSIM_WINDOW,
};
pub use tv::{tv_reconstruct, TvCheckpoint, TvResult, DEFAULT_TV_ITERATIONS, DEFAULT_TV_LAMBDA};
pub use harness::{
    masked_fbp, proxy_disclaimer, run_ablations, run_comparison, tv_baseline, AblationModels, EvalConfig, Method, Row,
    Table, ABLATION_DIRECT, ABLATION_DISTILLED, ABLATION_FULL, ABLATION_NO_PROXY, ABLATION_NO_SINOINP, CSV_HEADER,
};
