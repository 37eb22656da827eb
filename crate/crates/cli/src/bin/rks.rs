fn main() {
    let code = rks_cli::run(std::env::args_os().collect(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
