use clap::Parser;

fn main() -> anyhow::Result<()> {
    dki_cli::run(dki_cli::Cli::parse())
}
