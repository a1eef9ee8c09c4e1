fn main() {
    let code = effort_dial::cli::run(std::env::args_os(), &mut std::io::stderr());
    std::process::exit(code);
}
