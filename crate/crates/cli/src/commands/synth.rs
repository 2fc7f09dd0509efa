use std::path::Path;

use proxymim::data::{generate_synthetic, save_dataset};
use proxymim::Result;

use super::{prepare_out, write_config};
use crate::config::RunConfig;

pub fn run(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out(out, force)?;
    let items = generate_synthetic(&cfg.data)?;
    save_dataset(out, &items, cfg.data.patch_size, Some(&cfg.data), Some(&cfg.hash()))?;
    write_config(out, cfg)?;
    println!("wrote {} images to {}", items.len(), out.display());
    Ok(())
}
