use super::recipe::Recipe;

/// Linear warmup from 0 to `peak` over `warmup` steps, then half-cosine from
/// `peak` down to `min` at step `total - 1`; clamped at `min` afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub fn new(recipe: &Recipe, n_images: usize) -> Self {
        let total = recipe.total_steps(n_images);
        let warmup = (recipe.warmup_epochs / recipe.epochs as f64 * total as f64).round() as u64;
        Self { peak: recipe.peak_lr, min: recipe.min_lr, warmup, total }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let last = self.total.saturating_sub(1);
        if last <= self.warmup {
            return self.peak;
        }
        let t = ((step - self.warmup) as f64 / (last - self.warmup) as f64).min(1.0);
        self.min + (self.peak - self.min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub fn lr_schedule(step: u64, recipe: &Recipe, n_images: usize) -> f64 {
    Schedule::new(recipe, n_images).lr(step)
}
