//! C ABI over the market, bank, descriptor, and scenario APIs.
//!
//! Every function returns an [`AgoraStatus`]; results come back through out
//! pointers. On failure the message is kept per thread and can be read with
//! [`agora_last_error`]. Strings handed out by this library are owned by the
//! caller and must be released with [`agora_string_free`]. Handles are opaque
//! and released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use agora::bank::Bank;
use agora::descriptor;
use agora::market::{compute_shares, host_price, required_rate_for_share};
use agora::report::{parse_log, RunReport};
use agora::scenario::{run_source, Outcome, RunOptions};
use agora::{Bid, Credit, HostCapacity, SimTime};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgoraStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// A string argument was not UTF-8.
    InvalidUtf8 = 2,
    /// An argument was out of range or refused by the operation.
    InvalidArgument = 3,
    /// Text input (descriptor, scenario, log) did not parse.
    Parse = 4,
    /// The operation ran but reported a failure, e.g. a failed assertion.
    Diagnostic = 5,
    /// Something inside the library panicked.
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(AgoraStatus, String);

impl Failure {
    fn new(status: AgoraStatus, message: impl ToString) -> Self {
        Failure(status, message.to_string())
    }
}

/// Clears the last error, runs `f`, and turns its failure or panic into a
/// status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AgoraStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AgoraStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {message}"));
            AgoraStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(AgoraStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::new(AgoraStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::new(AgoraStatus::NullArgument, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(AgoraStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn give(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes replaced").into_raw()
}

/// Bids with the given rates: one credit each over `1 / rate` seconds.
fn bids_for(rates: &[f64]) -> Result<Vec<Bid>, Failure> {
    rates
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if !(r.is_finite() && r > 0.0) {
                return Err(Failure::new(AgoraStatus::InvalidArgument, format!("rate {i} is {r}; rates must be positive")));
            }
            Bid::new(format!("b{i}"), "ffi", Credit::from_units(1), 1.0 / r, SimTime::ZERO)
                .map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))
        })
        .collect()
}

/// The message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn agora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn agora_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn agora_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Proportional shares of `n` bid rates, written to `shares_out[0..n]`.
///
/// # Safety
/// `rates` and `shares_out` must each point to `n` valid `double`s.
#[no_mangle]
pub unsafe extern "C" fn agora_compute_shares(rates: *const f64, n: usize, shares_out: *mut f64) -> AgoraStatus {
    guard(|| {
        let rates = slice(rates, n, "rates")?;
        if n == 0 {
            return Err(Failure::new(AgoraStatus::InvalidArgument, "no rates"));
        }
        if shares_out.is_null() {
            return Err(Failure::new(AgoraStatus::NullArgument, "shares_out is null"));
        }
        let bids = bids_for(rates)?;
        let shares = compute_shares(&bids).map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))?;
        for (i, b) in bids.iter().enumerate() {
            *shares_out.add(i) = shares.get(&b.bid_id).expect("one share per bid");
        }
        Ok(())
    })
}

/// Price of a host: the sum of `n` rates over its CPU capacity.
///
/// # Safety
/// `rates` must point to `n` valid `double`s; `price_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn agora_host_price(rates: *const f64, n: usize, cpu_capacity: f64, price_out: *mut f64) -> AgoraStatus {
    guard(|| {
        let bids = bids_for(slice(rates, n, "rates")?)?;
        let cap = HostCapacity::new(cpu_capacity, 1).map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))?;
        *out(price_out, "price_out")? = host_price(&bids, &cap).map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// Smallest rate that obtains `target_share` against `competing_rate`.
///
/// # Safety
/// `rate_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn agora_required_rate(target_share: f64, competing_rate: f64, rate_out: *mut f64) -> AgoraStatus {
    guard(|| {
        let rate = required_rate_for_share(target_share, competing_rate).map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))?;
        *out(rate_out, "rate_out")? = rate.0;
        Ok(())
    })
}

/// An in-memory bank. Amounts are in cents.
pub struct AgoraBank(Bank);

/// Creates a bank whose reserve holds `supply_cents`.
///
/// # Safety
/// `bank_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn agora_bank_new(supply_cents: u64, bank_out: *mut *mut AgoraBank) -> AgoraStatus {
    guard(|| {
        let slot = out(bank_out, "bank_out")?;
        *slot = Box::into_raw(Box::new(AgoraBank(Bank::new(Credit::from_cents(supply_cents)))));
        Ok(())
    })
}

/// # Safety
/// `bank` must come from [`agora_bank_new`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn agora_bank_free(bank: *mut AgoraBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

unsafe fn bank_mut<'a>(bank: *mut AgoraBank) -> Result<&'a mut Bank, Failure> {
    bank.as_mut().map(|b| &mut b.0).ok_or_else(|| Failure::new(AgoraStatus::NullArgument, "bank is null"))
}

/// Opens `account`, funded with `grant_cents` from the reserve.
///
/// # Safety
/// `bank` must be a live handle and `account` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn agora_bank_open(bank: *mut AgoraBank, account: *const c_char, grant_cents: u64) -> AgoraStatus {
    guard(|| {
        let bank = bank_mut(bank)?;
        let account = text(account, "account")?;
        bank.open_account(account, Credit::from_cents(grant_cents), SimTime::ZERO)
            .map(drop)
            .map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))
    })
}

/// Pays a bid of `amount_cents` over `duration` seconds from `bidder` to `provider`.
///
/// # Safety
/// `bank` must be a live handle; `bid_id`, `bidder`, and `provider` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn agora_bank_settle(
    bank: *mut AgoraBank,
    bid_id: *const c_char,
    bidder: *const c_char,
    provider: *const c_char,
    amount_cents: u64,
    duration: f64,
) -> AgoraStatus {
    guard(|| {
        let bank = bank_mut(bank)?;
        let (bid_id, bidder, provider) = (text(bid_id, "bid_id")?, text(bidder, "bidder")?, text(provider, "provider")?);
        let bid = Bid::new(bid_id, bidder, Credit::from_cents(amount_cents), duration, SimTime::ZERO)
            .map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))?;
        bank.settle_bid(&bid, provider, SimTime::ZERO).map(drop).map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))
    })
}

/// Balance of `account` in cents.
///
/// # Safety
/// `bank` must be a live handle, `account` NUL-terminated, `cents_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_bank_balance(bank: *mut AgoraBank, account: *const c_char, cents_out: *mut u64) -> AgoraStatus {
    guard(|| {
        let bank = bank_mut(bank)?;
        let b = bank.balance(text(account, "account")?).map_err(|e| Failure::new(AgoraStatus::InvalidArgument, e))?;
        *out(cents_out, "cents_out")? = b.cents();
        Ok(())
    })
}

/// Sum of every balance, the reserve included, in cents.
///
/// # Safety
/// `bank` must be a live handle and `cents_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_bank_total(bank: *mut AgoraBank, cents_out: *mut u64) -> AgoraStatus {
    guard(|| {
        let total = bank_mut(bank)?.total();
        *out(cents_out, "cents_out")? = total.cents();
        Ok(())
    })
}

/// The journal as text, one entry per line.
///
/// # Safety
/// `bank` must be a live handle and `journal_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_bank_journal(bank: *mut AgoraBank, journal_out: *mut *mut c_char) -> AgoraStatus {
    guard(|| {
        let journal = bank_mut(bank)?.journal_text();
        *out(journal_out, "journal_out")? = give(journal);
        Ok(())
    })
}

fn descriptor_call(source: &str, f: impl FnOnce(Vec<descriptor::ComponentDescription>) -> Result<String, descriptor::DescriptorError>) -> Result<String, Failure> {
    let file = descriptor::parse_file(source).map_err(|e| Failure::new(AgoraStatus::Parse, e))?;
    f(file).map_err(|e| Failure::new(AgoraStatus::Diagnostic, e))
}

/// Canonical text of a descriptor file.
///
/// # Safety
/// `source` must be NUL-terminated and `text_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_descriptor_format(source: *const c_char, text_out: *mut *mut c_char) -> AgoraStatus {
    guard(|| {
        let formatted = descriptor_call(text(source, "source")?, |f| Ok(descriptor::print_file(&f)))?;
        *out(text_out, "text_out")? = give(formatted);
        Ok(())
    })
}

/// The resolved `sfConfig` tree of a descriptor, in canonical text.
///
/// # Safety
/// `source` must be NUL-terminated and `text_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_descriptor_resolve(source: *const c_char, text_out: *mut *mut c_char) -> AgoraStatus {
    guard(|| {
        let resolved = descriptor_call(text(source, "source")?, |f| descriptor::resolve_components(&f, &[]).map(|t| descriptor::print(&t)))?;
        *out(text_out, "text_out")? = give(resolved);
        Ok(())
    })
}

/// A finished scenario run.
pub struct AgoraScenario(Outcome);

/// Runs a scenario script. `seed` overrides the script's when `use_seed` is
/// set; `base_dir` (nullable) is where `deploy` finds descriptor files.
/// A run whose assertions fail still yields a handle and returns
/// `Diagnostic`.
///
/// # Safety
/// `source` must be NUL-terminated, `base_dir` null or NUL-terminated, and
/// `scenario_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_scenario_run(
    source: *const c_char,
    use_seed: bool,
    seed: u64,
    base_dir: *const c_char,
    scenario_out: *mut *mut AgoraScenario,
) -> AgoraStatus {
    guard(|| {
        let source = text(source, "source")?;
        let base_dir = if base_dir.is_null() { None } else { Some(PathBuf::from(text(base_dir, "base_dir")?)) };
        let slot = out(scenario_out, "scenario_out")?;
        *slot = ptr::null_mut();
        let opts = RunOptions { seed: use_seed.then_some(seed), until: None, base_dir };
        let outcome = run_source(source, &opts).map_err(|e| Failure::new(AgoraStatus::Parse, e))?;
        let passed = outcome.passed();
        let failed = outcome.assertions.iter().filter(|a| !a.pass).count();
        *slot = Box::into_raw(Box::new(AgoraScenario(outcome)));
        if passed {
            Ok(())
        } else {
            Err(Failure::new(AgoraStatus::Diagnostic, format!("{failed} assertion(s) failed")))
        }
    })
}

/// # Safety
/// `scenario` must come from [`agora_scenario_run`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn agora_scenario_free(scenario: *mut AgoraScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

unsafe fn scenario_ref<'a>(s: *const AgoraScenario) -> Result<&'a Outcome, Failure> {
    s.as_ref().map(|s| &s.0).ok_or_else(|| Failure::new(AgoraStatus::NullArgument, "scenario is null"))
}

/// The human-readable report of a run.
///
/// # Safety
/// `scenario` must be a live handle and `text_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_scenario_report(scenario: *const AgoraScenario, text_out: *mut *mut c_char) -> AgoraStatus {
    guard(|| {
        let report = scenario_ref(scenario)?.report.render();
        *out(text_out, "text_out")? = give(report);
        Ok(())
    })
}

/// The run's message log, one JSON envelope per line.
///
/// # Safety
/// `scenario` must be a live handle and `text_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_scenario_log(scenario: *const AgoraScenario, text_out: *mut *mut c_char) -> AgoraStatus {
    guard(|| {
        let log = scenario_ref(scenario)?.log_text();
        *out(text_out, "text_out")? = give(log);
        Ok(())
    })
}

/// Rebuilds the report from a message log alone.
///
/// # Safety
/// `log` must be NUL-terminated and `text_out` writable.
#[no_mangle]
pub unsafe extern "C" fn agora_report_from_log(log: *const c_char, text_out: *mut *mut c_char) -> AgoraStatus {
    guard(|| {
        let envs = parse_log(text(log, "log")?).map_err(|e| Failure::new(AgoraStatus::Parse, e))?;
        *out(text_out, "text_out")? = give(RunReport::from_log(&envs).render());
        Ok(())
    })
}
