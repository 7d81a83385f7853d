use std::io;

fn main() {
    let code = errlab_cli::main_with(
        std::env::args_os(),
        std::env::var(errlab_cli::SEED_ENV).ok(),
        &mut io::stdout().lock(),
        &mut io::stderr().lock(),
    );
    std::process::exit(code);
}
