use std::io::{self, Write};

fn main() {
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    let code = odf_cli::run(std::env::args_os(), &mut stdin.lock(), &mut stdout, &mut io::stderr());
    let _ = stdout.flush();
    std::process::exit(code);
}
