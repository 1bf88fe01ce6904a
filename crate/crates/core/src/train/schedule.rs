/// Number of linear-warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64).ceil() as usize
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, peak_lr: f64, warmup_ratio: f64) -> f64 {
    let warm = warmup_steps(total_steps, warmup_ratio).min(total_steps);
    if step < warm {
        return peak_lr * step as f64 / warm as f64;
    }
    if total_steps == warm {
        return peak_lr;
    }
    let progress = ((step - warm) as f64 / (total_steps - warm) as f64).min(1.0);
    0.5 * peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
