fn main() {
    for key in ["OPT_LEVEL", "PROFILE", "DEBUG"] {
        let v = std::env::var(key).unwrap_or_default();
        println!("cargo:rustc-env=CLAST_BUILD_{key}={v}");
    }
}
