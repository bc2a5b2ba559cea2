fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(kd_debias::cli::run_command(&args));
}
