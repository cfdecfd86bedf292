use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ccrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccrp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run_into(name: &str, dir: &Path, extra: &[&str]) -> Output {
    let scn = scenario(name);
    let out = dir.to_string_lossy();
    let mut args = vec!["run", scn.as_str(), "--out", &out];
    args.extend_from_slice(extra);
    ccrp(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn misaligned_run_agrees_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_into("misaligned.scn", tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("agreed: 6 (100.0%)"), "{}", stdout(&o));
    for f in [
        "meters.consumer",
        "meters.provider",
        "evidence.agreed",
        "evidence.nonagreed",
        "report.txt",
    ] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let v = ccrp(&["verify", &tmp.path().to_string_lossy()]);
    assert_eq!(v.status.code(), Some(0), "{}", stderr(&v));
    let r = ccrp(&["report", &tmp.path().to_string_lossy()]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(
        stdout(&r),
        fs::read_to_string(tmp.path().join("report.txt")).unwrap()
    );
}

#[test]
fn non_agreed_run_exits_two_and_still_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_into("jitter.scn", tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let v = ccrp(&["verify", &tmp.path().to_string_lossy()]);
    assert_eq!(v.status.code(), Some(0), "{}", stderr(&v));
    let text = fs::read_to_string(tmp.path().join("evidence.nonagreed")).unwrap();
    assert!(text.lines().count() > 2);
}

fn flip_last_byte(file: &Path, line_no: usize) -> u64 {
    let text = fs::read_to_string(file).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let (idx, body) = lines[line_no - 1].split_once('\t').unwrap();
    let idx: u64 = idx.parse().unwrap();
    let mut bytes: Vec<u8> = (0..body.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&body[i..i + 2], 16).unwrap())
        .collect();
    *bytes.last_mut().unwrap() ^= 0x01;
    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    lines[line_no - 1] = format!("{idx}\t{hex}");
    fs::write(file, lines.join("\n") + "\n").unwrap();
    idx
}

#[test]
fn verify_names_a_corrupted_entry() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run_into("aligned.scn", tmp.path(), &[]).status.code(),
        Some(0)
    );
    let interval = flip_last_byte(&tmp.path().join("evidence.agreed"), 5);
    let v = ccrp(&["verify", &tmp.path().to_string_lossy()]);
    assert_eq!(v.status.code(), Some(1));
    let err = stderr(&v);
    assert!(
        err.contains("evidence.agreed") && err.contains("line 5"),
        "{err}"
    );
    assert!(err.contains(&format!("interval {interval}")), "{err}");
}

#[test]
fn verify_names_an_entry_with_a_bad_signature() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run_into("aligned.scn", tmp.path(), &[]).status.code(),
        Some(0)
    );
    let path = tmp.path().join("evidence.agreed");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    // the line ends with the last token's 32-byte signature and an empty
    // 4-byte transcript
    let line = &mut lines[3];
    let pos = line.len() - 2 * (4 + 16);
    let flipped = match &line[pos..pos + 1] {
        "0" => "1",
        _ => "0",
    };
    line.replace_range(pos..pos + 1, flipped);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let v = ccrp(&["verify", &tmp.path().to_string_lossy()]);
    assert_eq!(v.status.code(), Some(1));
    let err = stderr(&v);
    assert!(err.contains("evidence.agreed line 4, interval 2"), "{err}");
    assert!(err.contains("invalid signature"), "{err}");
}

#[test]
fn verify_rejects_an_edited_meter_log() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run_into("aligned.scn", tmp.path(), &[]).status.code(),
        Some(0)
    );
    let path = tmp.path().join("meters.provider");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(10);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let v = ccrp(&["verify", &tmp.path().to_string_lossy()]);
    assert_eq!(v.status.code(), Some(1));
    assert!(stderr(&v).contains("provider log gives"), "{}", stderr(&v));
}

#[test]
fn replay_prints_rounds_or_a_notice() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run_into("aligned.scn", tmp.path(), &[]).status.code(),
        Some(0)
    );
    let r = ccrp(&["replay", &tmp.path().to_string_lossy(), "1"]);
    assert_eq!(r.status.code(), Some(0));
    assert!(
        stdout(&r).contains("no negotiation rounds"),
        "{}",
        stdout(&r)
    );

    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run_into("misaligned.scn", tmp.path(), &[]).status.code(),
        Some(0)
    );
    let r = ccrp(&["replay", &tmp.path().to_string_lossy(), "2"]);
    assert!(stdout(&r).contains("round 1: request #0"), "{}", stdout(&r));
    assert!(
        stdout(&r).contains("conflicts=interval-bounds"),
        "{}",
        stdout(&r)
    );

    let r = ccrp(&["replay", &tmp.path().to_string_lossy(), "99"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn flags_override_the_scenario() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_into("aligned.scn", a.path(), &[]);
    run_into("aligned.scn", b.path(), &["--seed", "42"]);
    let read = |d: &Path| fs::read(d.join("meters.consumer")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
    let resolved = fs::read_to_string(b.path().join("scenario.resolved")).unwrap();
    assert!(resolved.contains("seed=42\n"));

    let c = tempfile::tempdir().unwrap();
    let o = run_into(
        "jitter.scn",
        c.path(),
        &["--tolerance", "100000000", "--max-rounds", "5"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = fs::read_to_string(c.path().join("scenario.resolved")).unwrap();
    assert!(resolved.contains("max_rounds=5\n") && resolved.contains("tolerance=100000000\n"));
    let v = ccrp(&["verify", &c.path().to_string_lossy()]);
    assert_eq!(v.status.code(), Some(0), "{}", stderr(&v));
}

#[test]
fn errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad: PathBuf = tmp.path().join("bad.scn");
    fs::write(&bad, "seed=1\nnonsense=3\n").unwrap();
    let o = ccrp(&[
        "run",
        &bad.to_string_lossy(),
        "--out",
        &tmp.path().join("o").to_string_lossy(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = run_into("aligned.scn", &tmp.path().join("o"), &["--max-rounds", "0"]);
    assert_eq!(o.status.code(), Some(1));

    let o = ccrp(&["verify", &tmp.path().join("missing").to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
}
