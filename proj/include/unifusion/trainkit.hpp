#pragma once

#include "unifusion/model.hpp"
#include "unifusion/objectives.hpp"
#include "unifusion/optim.hpp"
#include "unifusion/synthdata.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace unifusion::train {

enum class Phase { p1a = 0, p1b = 1, p2 = 2 };
const char* phase_name(Phase p);

// The freeze policy edits only the trainable mask, never parameter values.
// Phase 1a trains the representation stack, 1b the generation heads with the
// encoder frozen, phase 2 the encoder and adapters with the base LM frozen.
std::vector<std::string> trainable_prefixes(Phase p);

struct PhaseConfig {
    int steps = 0;
    int batch = 16;
    double base_lr = 3e-4;
    double warmup_frac = 0.03;
    std::uint64_t seed = 1;
    int eval_cadence = 200;
    loss::Weights weights;
};

// Everything beyond parameter values needed to restart a run bit-exactly.
struct RunCursor {
    int phase = 0; // Phase as int
    int step = 0;  // within the phase
    AdamWState opt;
    std::uint64_t batch_counter = 0;
    std::uint64_t draw_counter = 0;
};

// Checkpoint file layout: the shared tensor format, with optimizer moments
// under opt.m./opt.v. and scalars under meta.*.
void save_checkpoint(const Model& m, const RunCursor& c, const std::string& path);
RunCursor load_checkpoint(Model& m, const std::string& path);

// FNV-1a over the byte images of every parameter matching a frozen prefix.
std::uint64_t frozen_hash(const ParamStore& ps, const std::vector<std::string>& trainable);

struct StepLog {
    int step = 0;
    double lr = 0.0;
    loss::LossReport report;
};

// Advances cursor.step to to_step. Applies the phase freeze policy, audits
// frozen bytes at every eval cadence, and aborts on non-finite loss after
// restoring the last good snapshot (also written to abort_path when given).
std::vector<StepLog> run_phase(Model& m, Phase phase, const PhaseConfig& cfg,
                               const synth::DatasetManifest& data,
                               const std::vector<synth::CIRTriplet>* triplets, RunCursor& cursor,
                               int to_step, std::ostream* log, const std::string& abort_path = "");

// Sub-phase 1a minimizes the cross-modal loss with the encoder trainable;
// 1b minimizes ITG + q2I with the encoder frozen. Writes phase1.ckpt.
std::string train_phase1(Model& m, const PhaseConfig& cfg1a, const PhaseConfig& cfg1b,
                         const synth::DatasetManifest& data, const std::string& run_dir,
                         std::ostream* log);

// Composed fine-tuning from a phase-1 checkpoint. Writes phase2.ckpt.
std::string train_phase2(Model& m, const PhaseConfig& cfg, const synth::DatasetManifest& data,
                         const std::vector<synth::CIRTriplet>& triplets,
                         const std::string& phase1_ckpt, const std::string& run_dir,
                         std::ostream* log);

} // namespace unifusion::train
