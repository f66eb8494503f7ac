//! On-disk campaign directory: `campaign.json` (the full state,
//! versioned schema), `runs.csv` (the append-only ledger), and an
//! advisory lock file that serializes writers.
//!
//! Durability contract: ledger rows are appended (and synced) before
//! the state is rewritten, and the state write goes through a temp
//! file + rename. A process killed between the two leaves a ledger row
//! the state still counts as pending; `open` reconciles that by
//! retiring recorded run_ids from the queue.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};

use super::{ledger, Campaign, CampaignState, Phase};
use crate::doe::FactorSpec;
use crate::error::{Error, Result};

pub const STATE_FILE: &str = "campaign.json";
pub const LOCK_FILE: &str = "campaign.lock";

/// Handle on a campaign directory. Holds the advisory lock for its
/// lifetime; dropping it releases the lock.
#[derive(Debug)]
pub struct CampaignDir {
    path: PathBuf,
    _lock: File,
}

impl CampaignDir {
    fn acquire_lock(dir: &Path) -> Result<File> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .open(dir.join(LOCK_FILE))?;
        // Advisory and non-blocking: a second writer errors out
        // instead of silently interleaving with the first.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            return Err(Error::Locked(dir.display().to_string()));
        }
        Ok(file)
    }

    /// Creates the directory layout for a freshly initialized campaign.
    /// Refuses to overwrite an existing campaign.
    pub fn create(dir: &Path, campaign: &Campaign) -> Result<CampaignDir> {
        std::fs::create_dir_all(dir)?;
        let lock = Self::acquire_lock(dir)?;
        if dir.join(STATE_FILE).exists() {
            return Err(Error::InvalidConfig {
                field: dir.display().to_string(),
                reason: "directory already holds a campaign".into(),
            });
        }
        let store = CampaignDir {
            path: dir.to_path_buf(),
            _lock: lock,
        };
        let names: Vec<String> = campaign.factor_names();
        ledger::create(&store.ledger_path(&campaign.state), &names)?;
        store.save_state(&campaign.state)?;
        Ok(store)
    }

    /// Opens an existing campaign: loads the state, replays the ledger
    /// into memory, and reconciles any rows a crash left unapplied.
    pub fn open(dir: &Path) -> Result<(CampaignDir, Campaign)> {
        let lock = Self::acquire_lock(dir)?;
        let state_path = dir.join(STATE_FILE);
        if !state_path.exists() {
            return Err(Error::InvalidConfig {
                field: dir.display().to_string(),
                reason: "no campaign here (expected campaign.json; run init first)".into(),
            });
        }
        let text = std::fs::read_to_string(&state_path)?;
        let state: CampaignState = serde_json::from_str(&text)?;
        if state.config_digest != state.config.digest() {
            return Err(Error::InvalidConfig {
                field: state_path.display().to_string(),
                reason: "config does not match its recorded digest (state edited by hand?)"
                    .into(),
            });
        }
        let store = CampaignDir {
            path: dir.to_path_buf(),
            _lock: lock,
        };
        let specs: Vec<FactorSpec> = state.factors.iter().map(|f| f.original.clone()).collect();
        let records = ledger::read(&store.ledger_path(&state), &specs)?;
        let mut campaign = Campaign { state, records };
        let recorded: HashSet<u64> = campaign.records.iter().map(|r| r.run_id).collect();
        campaign
            .state
            .pending
            .retain(|p| !recorded.contains(&p.run_id));
        // Re-take the bookkeeping flip if the crash landed between the
        // last confirmation row and the state write.
        if campaign.state.phase == Phase::Confirmation
            && campaign.state.pending.is_empty()
            && campaign
                .records
                .iter()
                .any(|r| r.phase == Phase::Confirmation)
        {
            campaign.state.phase = Phase::Done;
        }
        Ok((store, campaign))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn ledger_path(&self, state: &CampaignState) -> PathBuf {
        self.path.join(&state.ledger_file)
    }

    /// Atomically rewrites `campaign.json` (temp file + rename), so a
    /// kill at any instant leaves either the old or the new state.
    pub fn save_state(&self, state: &CampaignState) -> Result<()> {
        let tmp = self.path.join("campaign.json.tmp");
        let mut text = serde_json::to_string_pretty(state)?;
        text.push('\n');
        {
            let mut file = File::create(&tmp)?;
            file.write_all(text.as_bytes())?;
            file.sync_all()?;
        }
        std::fs::rename(&tmp, self.path.join(STATE_FILE))?;
        // Sync the directory entry so the rename survives a power cut.
        File::open(&self.path)?.sync_all()?;
        Ok(())
    }

    /// Appends newly recorded runs to the ledger. Call before
    /// `save_state`: a row the state still thinks is pending is
    /// recoverable, the reverse is not.
    pub fn append_records(
        &self,
        state: &CampaignState,
        rows: &[ledger::RunRecord],
    ) -> Result<()> {
        ledger::append(&self.ledger_path(state), rows)
    }
}
