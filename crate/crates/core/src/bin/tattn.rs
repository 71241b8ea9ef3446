use std::io::{stderr, stdout};
use std::process::exit;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = tattn::cli::run(std::env::args_os(), &mut stdout().lock(), &mut stderr().lock());
    exit(code);
}
