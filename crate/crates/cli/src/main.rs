use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = metacog_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let code = metacog_cli::execute(cli, &mut stdout);
    std::process::exit(code);
}
