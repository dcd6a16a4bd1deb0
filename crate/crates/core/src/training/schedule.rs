use std::f64::consts::{E, PI};

/// Routing temperature at optimizer step `s` of `total`:
/// `τ_max·(τ_min/τ_max)^ln(1 + (e − 1)·min(s/S, 1))`.
pub fn temperature_schedule(s: u64, total: u64, tau_max: f64, tau_min: f64) -> f64 {
    let p = (s as f64 / total.max(1) as f64).min(1.0);
    if p == 0.0 {
        return tau_max;
    }
    if p == 1.0 {
        return tau_min;
    }
    let rho = (1.0 + (E - 1.0) * p).ln();
    tau_max * (tau_min / tau_max).powf(rho)
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 0 at `total`; 0 beyond.
pub fn lr_schedule(s: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if s < warmup {
        return peak * s as f64 / warmup as f64;
    }
    if s >= total {
        return 0.0;
    }
    let span = (total - warmup) as f64;
    let progress = (s - warmup) as f64 / span;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Tokens consumed by one optimizer update.
pub fn tokens_per_update(batch: usize, accum: usize, seq: usize) -> usize {
    batch * accum * seq
}

/// `exp(min(loss, 20))`.
pub fn perplexity(loss: f64) -> f64 {
    loss.min(20.0).exp()
}
