fn main() {
    let argv: Vec<std::ffi::OsString> = std::env::args_os().collect();
    let code = aod_cli::run(&argv, &mut std::io::stdout().lock());
    std::process::exit(code);
}
