//! Central credit ledger.
//!
//! Every balance change is a journal entry; replaying the journal from genesis
//! rebuilds the exact balances. Initial grants come out of a distinguished
//! reserve account, so the sum of all balances never changes.

use std::any::Any;
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::market::{Bid, Credit};
use crate::simnet::envelope::canonical_json;
use crate::simnet::{Context, Envelope, Service};
use crate::time::SimTime;

pub const RESERVE_ACCOUNT: &str = "reserve";
pub const BANK_ENDPOINT: &str = "bank";

/// Credits the reserve starts with unless configured otherwise.
pub const DEFAULT_RESERVE_SUPPLY: Credit = Credit::from_cents(1_000_000_00);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("account `{0}` already exists")]
    DuplicateAccount(String),
    #[error("unknown account `{0}`")]
    UnknownAccount(String),
    #[error("insufficient funds in `{account}`: balance {balance}, needed {needed}")]
    InsufficientFunds { account: String, balance: Credit, needed: Credit },
    #[error("invalid transfer: {0}")]
    InvalidTransfer(String),
    #[error("injected fault aborted the operation")]
    InjectedFault,
    #[error("journal line {line}: {reason}")]
    Replay { line: usize, reason: String },
}

impl BankError {
    pub fn code(&self) -> &'static str {
        match self {
            BankError::DuplicateAccount(_) => "duplicate_account",
            BankError::UnknownAccount(_) => "unknown_account",
            BankError::InsufficientFunds { .. } => "insufficient_funds",
            BankError::InvalidTransfer(_) => "invalid_transfer",
            BankError::InjectedFault => "fault",
            BankError::Replay { .. } => "replay",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferReason {
    BidSettlement,
    Grant,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub transfer_id: String,
    pub from: String,
    pub to: String,
    pub amount: Credit,
    pub reason: TransferReason,
    pub at: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bid_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalEntry {
    Genesis { supply: Credit },
    Open { account: String, at: SimTime },
    Transfer(Transfer),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub balance: Credit,
}

#[derive(Clone, Debug)]
pub struct Bank {
    balances: BTreeMap<String, Credit>,
    journal: Vec<JournalEntry>,
    fault_armed: bool,
}

impl Bank {
    pub fn new(reserve_supply: Credit) -> Self {
        let mut bank = Bank { balances: BTreeMap::new(), journal: Vec::new(), fault_armed: false };
        bank.apply(JournalEntry::Genesis { supply: reserve_supply }).expect("genesis applies to an empty bank");
        bank
    }

    /// The next balance-moving operation fails halfway through and rolls back.
    pub fn arm_fault(&mut self) {
        self.fault_armed = true;
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn accounts(&self) -> impl Iterator<Item = Account> + '_ {
        self.balances.iter().map(|(id, b)| Account { account_id: id.clone(), balance: *b })
    }

    pub fn balance(&self, account_id: &str) -> Result<Credit, BankError> {
        self.balances.get(account_id).copied().ok_or_else(|| BankError::UnknownAccount(account_id.to_string()))
    }

    /// Sum of every balance, the reserve included.
    pub fn total(&self) -> Credit {
        self.balances.values().fold(Credit::ZERO, |acc, b| acc.checked_add(*b).expect("total bounded by genesis supply"))
    }

    pub fn open_account(&mut self, account_id: &str, initial_grant: Credit, at: SimTime) -> Result<Account, BankError> {
        if account_id.is_empty() {
            return Err(BankError::InvalidTransfer("empty account id".into()));
        }
        if self.balances.contains_key(account_id) {
            return Err(BankError::DuplicateAccount(account_id.to_string()));
        }
        let reserve = self.balance(RESERVE_ACCOUNT)?;
        if reserve < initial_grant {
            return Err(BankError::InsufficientFunds {
                account: RESERVE_ACCOUNT.into(),
                balance: reserve,
                needed: initial_grant,
            });
        }
        self.apply(JournalEntry::Open { account: account_id.to_string(), at })?;
        if !initial_grant.is_zero() {
            let transfer = self.make_transfer(RESERVE_ACCOUNT, account_id, initial_grant, TransferReason::Grant, at, None);
            if let Err(e) = self.apply(JournalEntry::Transfer(transfer)) {
                self.balances.remove(account_id);
                self.journal.pop();
                return Err(e);
            }
        }
        Ok(Account { account_id: account_id.to_string(), balance: initial_grant })
    }

    /// Moves the whole bid amount from bidder to provider.
    pub fn settle_bid(&mut self, bid: &Bid, provider_account: &str, at: SimTime) -> Result<Transfer, BankError> {
        bid.validate().map_err(|e| BankError::InvalidTransfer(e.to_string()))?;
        self.transfer(&bid.bidder, provider_account, bid.amount, TransferReason::BidSettlement, at, Some(bid.bid_id.0.clone()))
    }

    pub fn transfer(
        &mut self,
        from: &str,
        to: &str,
        amount: Credit,
        reason: TransferReason,
        at: SimTime,
        bid_id: Option<String>,
    ) -> Result<Transfer, BankError> {
        let transfer = self.make_transfer(from, to, amount, reason, at, bid_id);
        self.apply(JournalEntry::Transfer(transfer.clone()))?;
        Ok(transfer)
    }

    fn make_transfer(&self, from: &str, to: &str, amount: Credit, reason: TransferReason, at: SimTime, bid_id: Option<String>) -> Transfer {
        let n = self.journal.iter().filter(|e| matches!(e, JournalEntry::Transfer(_))).count() + 1;
        Transfer {
            transfer_id: format!("t{n}"),
            from: from.to_string(),
            to: to.to_string(),
            amount,
            reason,
            at,
            bid_id,
        }
    }

    fn check_transfer(&self, t: &Transfer) -> Result<(), BankError> {
        if t.amount.is_zero() {
            return Err(BankError::InvalidTransfer("amount must be positive".into()));
        }
        if t.from == t.to {
            return Err(BankError::InvalidTransfer("source and destination are the same account".into()));
        }
        let balance = self.balance(&t.from)?;
        self.balance(&t.to)?;
        if balance < t.amount {
            return Err(BankError::InsufficientFunds { account: t.from.clone(), balance, needed: t.amount });
        }
        Ok(())
    }

    /// Validates and applies one entry, appending it to the journal.
    fn apply(&mut self, entry: JournalEntry) -> Result<(), BankError> {
        match &entry {
            JournalEntry::Genesis { supply } => {
                if !self.journal.is_empty() {
                    return Err(BankError::InvalidTransfer("genesis must be the first entry".into()));
                }
                self.balances.insert(RESERVE_ACCOUNT.to_string(), *supply);
            }
            JournalEntry::Open { account, .. } => {
                if self.balances.contains_key(account) {
                    return Err(BankError::DuplicateAccount(account.clone()));
                }
                self.balances.insert(account.clone(), Credit::ZERO);
            }
            JournalEntry::Transfer(t) => {
                self.check_transfer(t)?;
                let from_before = self.balances[&t.from];
                self.balances.insert(t.from.clone(), from_before.checked_sub(t.amount).expect("checked"));
                if std::mem::take(&mut self.fault_armed) {
                    self.balances.insert(t.from.clone(), from_before);
                    return Err(BankError::InjectedFault);
                }
                let to_after = self.balances[&t.to].checked_add(t.amount);
                match to_after {
                    Some(v) => self.balances.insert(t.to.clone(), v),
                    None => {
                        self.balances.insert(t.from.clone(), from_before);
                        return Err(BankError::InvalidTransfer("overflow".into()));
                    }
                };
            }
        }
        self.journal.push(entry);
        Ok(())
    }

    /// Rebuilds a bank from its journal.
    pub fn replay(entries: &[JournalEntry]) -> Result<Bank, BankError> {
        let mut bank = Bank { balances: BTreeMap::new(), journal: Vec::new(), fault_armed: false };
        for (i, entry) in entries.iter().enumerate() {
            if i == 0 && !matches!(entry, JournalEntry::Genesis { .. }) {
                return Err(BankError::Replay { line: 1, reason: "journal must start with genesis".into() });
            }
            bank.apply(entry.clone()).map_err(|e| BankError::Replay { line: i + 1, reason: e.to_string() })?;
        }
        if bank.journal.is_empty() {
            return Err(BankError::Replay { line: 0, reason: "empty journal".into() });
        }
        Ok(bank)
    }

    pub fn entry_line(entry: &JournalEntry) -> String {
        canonical_json(&serde_json::to_value(entry).expect("journal entries serialize"))
    }

    /// Newline-delimited canonical journal.
    pub fn journal_text(&self) -> String {
        self.journal.iter().map(|e| Self::entry_line(e) + "\n").collect()
    }

    pub fn from_journal_text(text: &str) -> Result<Bank, BankError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| BankError::Replay { line: i + 1, reason: e.to_string() }))
            .collect::<Result<Vec<JournalEntry>, _>>()?;
        Bank::replay(&entries)
    }
}

#[derive(Debug, Deserialize)]
struct OpenRequest {
    account: String,
    #[serde(default)]
    grant: Credit,
}

#[derive(Debug, Deserialize)]
struct SettleRequest {
    bid: Bid,
    provider: String,
}

#[derive(Debug, Deserialize)]
struct BalanceRequest {
    account: String,
}

/// Serves `bank.open`, `bank.settle`, and `bank.balance`.
///
/// Replies to mutating requests carry the resulting balances of every
/// account they touched under `balances`.
pub struct BankService {
    bank: Bank,
    journal_path: Option<PathBuf>,
    persisted: usize,
}

impl BankService {
    pub fn new(reserve_supply: Credit) -> Self {
        BankService { bank: Bank::new(reserve_supply), journal_path: None, persisted: 0 }
    }

    /// Loads the journal at `path` if it exists and appends to it from then on.
    pub fn with_journal(path: PathBuf, reserve_supply: Credit) -> Result<Self, BankError> {
        let (bank, persisted) = match std::fs::read_to_string(&path) {
            Ok(text) if !text.trim().is_empty() => {
                let bank = Bank::from_journal_text(&text)?;
                let n = bank.journal().len();
                (bank, n)
            }
            _ => (Bank::new(reserve_supply), 0),
        };
        let mut svc = BankService { bank, journal_path: Some(path), persisted };
        svc.persist();
        Ok(svc)
    }

    pub fn bank(&self) -> &Bank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut Bank {
        &mut self.bank
    }

    fn persist(&mut self) {
        let Some(path) = &self.journal_path else { return };
        let pending = &self.bank.journal()[self.persisted..];
        if pending.is_empty() {
            return;
        }
        let lines: String = pending.iter().map(|e| Bank::entry_line(e) + "\n").collect();
        let written = OpenOptions::new().create(true).append(true).open(path).and_then(|mut f| f.write_all(lines.as_bytes()));
        match written {
            Ok(()) => self.persisted = self.bank.journal().len(),
            Err(e) => log::error!("cannot append to bank journal {}: {e}", path.display()),
        }
    }

    fn balances_of(&self, accounts: &[&str]) -> Value {
        let map: BTreeMap<&str, String> = accounts
            .iter()
            .filter_map(|a| self.bank.balance(a).ok().map(|b| (*a, b.to_string())))
            .collect();
        json!(map)
    }

    fn handle(&mut self, ctx: &mut dyn Context, msg: &Envelope) -> Result<Value, BankError> {
        let bad = |e: serde_json::Error| BankError::InvalidTransfer(format!("malformed body: {e}"));
        match msg.msg_type.as_str() {
            "bank.open" => {
                let req: OpenRequest = msg.body_as().map_err(bad)?;
                let account = self.bank.open_account(&req.account, req.grant, ctx.now())?;
                Ok(json!({"account": account, "balances": self.balances_of(&[&req.account, RESERVE_ACCOUNT])}))
            }
            "bank.settle" => {
                let req: SettleRequest = msg.body_as().map_err(bad)?;
                let transfer = self.bank.settle_bid(&req.bid, &req.provider, ctx.now())?;
                Ok(json!({"transfer": transfer, "balances": self.balances_of(&[&transfer.from, &transfer.to])}))
            }
            "bank.balance" => {
                let req: BalanceRequest = msg.body_as().map_err(bad)?;
                let balance = self.bank.balance(&req.account)?;
                Ok(json!({"account": req.account, "balance": balance}))
            }
            other => Err(BankError::InvalidTransfer(format!("unsupported message `{other}`"))),
        }
    }
}

impl Service for BankService {
    fn on_message(&mut self, ctx: &mut dyn Context, msg: &Envelope) {
        if msg.msg_type.ends_with(".ok") || msg.msg_type.ends_with(".err") || msg.msg_type.starts_with("net.") {
            return;
        }
        match self.handle(ctx, msg) {
            Ok(body) => ctx.reply_ok(msg, body),
            Err(e) => ctx.reply_err(msg, e.code(), &e.to_string()),
        }
        self.persist();
    }

    /// State comes back from the journal alone.
    fn on_restart(&mut self, _ctx: &mut dyn Context) {
        match Bank::replay(self.bank.journal()) {
            Ok(bank) => self.bank = bank,
            Err(e) => log::error!("bank journal replay failed: {e}"),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> Credit {
        s.parse().unwrap()
    }

    fn bid(bidder: &str, amount: &str) -> Bid {
        Bid::new("b1", bidder, c(amount), 10.0, SimTime::ZERO).unwrap()
    }

    /// Independent check: fold the journal by hand.
    fn replay_oracle(journal: &[JournalEntry]) -> BTreeMap<String, i128> {
        let mut m = BTreeMap::new();
        for e in journal {
            match e {
                JournalEntry::Genesis { supply } => {
                    m.insert(RESERVE_ACCOUNT.to_string(), supply.cents() as i128);
                }
                JournalEntry::Open { account, .. } => {
                    m.insert(account.clone(), 0);
                }
                JournalEntry::Transfer(t) => {
                    *m.get_mut(&t.from).unwrap() -= t.amount.cents() as i128;
                    *m.get_mut(&t.to).unwrap() += t.amount.cents() as i128;
                }
            }
        }
        m
    }

    #[test]
    fn open_accounts() {
        let mut bank = Bank::new(c("1000"));
        assert_eq!(bank.open_account("alice", c("100.00"), SimTime::ZERO).unwrap().balance, c("100"));
        assert_eq!(bank.open_account("bob", Credit::ZERO, SimTime::ZERO).unwrap().balance, Credit::ZERO);
        assert_eq!(bank.open_account("alice", c("1"), SimTime::ZERO), Err(BankError::DuplicateAccount("alice".into())));
        assert_eq!(bank.balance(RESERVE_ACCOUNT).unwrap(), c("900"));
    }

    #[test]
    fn settle_moves_whole_amount() {
        let mut bank = Bank::new(c("1000"));
        bank.open_account("alice", c("100"), SimTime::ZERO).unwrap();
        bank.open_account("bob", Credit::ZERO, SimTime::ZERO).unwrap();
        let t = bank.settle_bid(&bid("alice", "40"), "bob", SimTime::from_secs(3.0)).unwrap();
        assert_eq!(t.reason, TransferReason::BidSettlement);
        assert_eq!(bank.balance("alice").unwrap(), c("60"));
        assert_eq!(bank.balance("bob").unwrap(), c("40"));
        let oracle = replay_oracle(bank.journal());
        assert_eq!(oracle["alice"], 6000);
        assert_eq!(oracle["bob"], 4000);
    }

    #[test]
    fn settle_rejects_overdraft_without_change() {
        let mut bank = Bank::new(c("1000"));
        bank.open_account("alice", c("10"), SimTime::ZERO).unwrap();
        bank.open_account("bob", Credit::ZERO, SimTime::ZERO).unwrap();
        let before = bank.journal().len();
        assert!(matches!(bank.settle_bid(&bid("alice", "40"), "bob", SimTime::ZERO), Err(BankError::InsufficientFunds { .. })));
        assert_eq!(bank.balance("alice").unwrap(), c("10"));
        assert_eq!(bank.journal().len(), before);
    }

    #[test]
    fn settle_exact_balance() {
        let mut bank = Bank::new(c("1000"));
        bank.open_account("alice", c("100"), SimTime::ZERO).unwrap();
        bank.open_account("p", c("5"), SimTime::ZERO).unwrap();
        bank.settle_bid(&bid("alice", "100"), "p", SimTime::ZERO).unwrap();
        assert_eq!(bank.balance("alice").unwrap(), Credit::ZERO);
        assert_eq!(bank.balance("p").unwrap(), c("105"));
    }

    #[test]
    fn unknown_accounts() {
        let mut bank = Bank::new(c("1000"));
        assert_eq!(bank.balance("z"), Err(BankError::UnknownAccount("z".into())));
        bank.open_account("a", c("50"), SimTime::ZERO).unwrap();
        assert!(matches!(bank.settle_bid(&bid("a", "1"), "nobody", SimTime::ZERO), Err(BankError::UnknownAccount(_))));
        assert_eq!(bank.balance("a").unwrap(), c("50"));
    }

    #[test]
    fn balance_after_settlement_matches_replay() {
        let mut bank = Bank::new(c("1000"));
        bank.open_account("a", c("50"), SimTime::ZERO).unwrap();
        bank.open_account("b", Credit::ZERO, SimTime::ZERO).unwrap();
        bank.settle_bid(&bid("a", "20"), "b", SimTime::ZERO).unwrap();
        assert_eq!(bank.balance("a").unwrap(), c("30"));
        assert_eq!(replay_oracle(bank.journal())["a"], 3000);
    }

    #[test]
    fn injected_fault_rolls_back() {
        let mut bank = Bank::new(c("1000"));
        bank.open_account("a", c("50"), SimTime::ZERO).unwrap();
        bank.open_account("b", Credit::ZERO, SimTime::ZERO).unwrap();
        let snapshot: Vec<_> = bank.accounts().collect();
        bank.arm_fault();
        assert_eq!(bank.settle_bid(&bid("a", "20"), "b", SimTime::ZERO), Err(BankError::InjectedFault));
        assert_eq!(bank.accounts().collect::<Vec<_>>(), snapshot);
        // one-shot
        bank.settle_bid(&bid("a", "20"), "b", SimTime::ZERO).unwrap();
    }

    #[test]
    fn journal_text_replays_exactly() {
        let mut bank = Bank::new(c("1000"));
        bank.open_account("a", c("50"), SimTime::ZERO).unwrap();
        bank.open_account("b", Credit::ZERO, SimTime::from_secs(1.0)).unwrap();
        bank.settle_bid(&bid("a", "12.34"), "b", SimTime::from_secs(2.0)).unwrap();
        let text = bank.journal_text();
        let again = Bank::from_journal_text(&text).unwrap();
        assert_eq!(again.accounts().collect::<Vec<_>>(), bank.accounts().collect::<Vec<_>>());
        assert_eq!(again.journal_text(), text);
        assert!(Bank::from_journal_text("{\"kind\":\"open\",\"account\":\"x\",\"at\":0}\n").is_err());
        assert!(matches!(Bank::from_journal_text(&(text + "{bad\n")), Err(BankError::Replay { line: 6, .. })));
    }

    #[test]
    fn journal_file_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.journal");
        {
            let mut svc = BankService::with_journal(path.clone(), c("500")).unwrap();
            svc.bank_mut().open_account("a", c("7"), SimTime::ZERO).unwrap();
            svc.persist();
        }
        let svc = BankService::with_journal(path, c("999")).unwrap();
        assert_eq!(svc.bank().balance("a").unwrap(), c("7"));
        assert_eq!(svc.bank().total(), c("500"));
    }
}
