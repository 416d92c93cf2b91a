use std::path::PathBuf;

use clap::Parser;
use maskseg::datagen::{gen_dataset, write_dataset, DataConfig};
use maskseg::{Error, Result};

use crate::manifest::RunTracker;

#[derive(Parser, Debug)]
pub struct Args {
    /// Master random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scenes to generate
    #[arg(long)]
    pub scenes: usize,
    /// Scene size as HxW (both divisible by 8)
    #[arg(long, default_value = "48x64")]
    pub size: String,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Split name; the "test" split gets road anomalies pasted in
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Maximum number of things (cars/persons) per scene
    #[arg(long, default_value_t = 3)]
    pub max_things: usize,
}

pub fn run(args: Args) -> Result<()> {
    if args.scenes == 0 {
        return Err(Error::config("scene count must be positive"));
    }
    let (height, width) = super::parse_size(&args.size)?;
    let config = DataConfig {
        height,
        width,
        num_classes: 6,
        max_things: args.max_things,
    };
    let mut tracker = RunTracker::start("datagen");
    tracker.seed(args.seed).output(&args.out);
    let dataset = gen_dataset(&config, args.seed, args.scenes, &args.split)?;
    write_dataset(&args.out, &dataset)?;
    tracker.finish(&args.out)?;
    println!(
        "wrote {} {} scenes ({}x{}) to {}",
        args.scenes,
        args.split,
        height,
        width,
        args.out.display()
    );
    Ok(())
}
