fn main() {
    std::process::exit(lion_lora::cli::run(std::env::args_os()));
}
