use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()))
        .init();
    if let Err(err) = clad::cli::run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
