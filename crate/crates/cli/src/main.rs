use clap::Parser;

fn main() {
    let cli = gvtnet_cli::Cli::parse();
    let code = gvtnet_cli::run(cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
