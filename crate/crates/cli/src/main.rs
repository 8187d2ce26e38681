use clap::Parser;

fn main() -> anyhow::Result<()> {
    ncplab::run(ncplab::Cli::parse())
}
