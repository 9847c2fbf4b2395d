use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = jointpred_cli::Cli::parse();
    if let Err(e) = jointpred_cli::run(cli) {
        let causes: Vec<String> = e.chain().map(|c| c.to_string()).collect();
        let body = serde_json::json!({ "error": { "message": causes[0], "causes": &causes[1..] } });
        eprintln!("{body}");
        std::process::exit(1);
    }
}
