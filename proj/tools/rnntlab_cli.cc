#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "rnntlab/experiment.h"
#include "rnntlab/transducer_loss.h"

namespace fs = std::filesystem;
using namespace rnntlab;

namespace {

constexpr int kConfigExit = 2;
constexpr int kStageExit = 3;
constexpr const char* kOutRootEnv = "RNNTLAB_OUT_ROOT";

// Segmentation of the worked example: "_hey _cor tana _i _love _garden ing".
Vocabulary example_vocab() {
  return Vocabulary({"<blank>", "<unk>", "_hey", "_cor", "tana", "_i", "_love", "_garden", "ing"});
}

fs::path default_out(const std::string& stem) {
  const char* root = std::getenv(kOutRootEnv);
  return fs::path(root && *root ? root : "runs") / stem;
}

ExperimentConfig load_config(const std::string& path) {
  return path.empty() ? parse_experiment_config("") : load_experiment_config(path);
}

void write_csv(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << body;
}

std::vector<std::uint64_t> seed_list(std::uint64_t first, std::size_t n) {
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(first + i);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rnntlab: desk-scale streaming transducer laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, text, vocab_path, csv_path;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1, seeds = 5, tau = 2, beam = kDefaultBeam;
  std::uint64_t frames = 100, labels = 7, vocab_classes = 4000, bytes_per = 4;
  std::optional<double> gap;
  double lookahead = 0.0, frame_ms = 30.0;

  auto* run = app.add_subcommand("run", "Run the configured pipeline stages");
  run->add_option("--config", config_path, "Experiment config file")->required();
  run->add_option("--out", out_dir, std::string("Output directory (default $") + kOutRootEnv + "/<config>)");
  run->add_option("--seed", seed, "Global seed");
  run->add_option("--jobs", jobs, "Decoding threads")->check(CLI::PositiveNumber);

  auto* tok = app.add_subcommand("tokenize", "Count tokens under the marker and delimiter schemes");
  tok->add_option("--text", text, "Sentence")->default_val("hey cortana i love gardening");
  tok->add_option("--vocab", vocab_path, "Vocabulary file (default: worked-example pieces)");
  tok->add_option("--csv", csv_path, "Also write the table here");

  auto* mem = app.add_subcommand("memsim", "Bytes of one T x (U+1) x (V+1) lattice tensor");
  mem->add_option("-T,--frames", frames, "Encoder frames");
  mem->add_option("-U,--labels", labels, "Label count");
  mem->add_option("-V,--vocab", vocab_classes, "Vocabulary size (without blank)");
  mem->add_option("--bytes", bytes_per, "Bytes per element");
  mem->add_option("--csv", csv_path, "Also write the table here");

  auto* lat = app.add_subcommand("latency", "Latency arithmetic, or the delay histogram of a finished run");
  lat->add_option("--gap", gap, "Mean gap in encoder frames");
  lat->add_option("--lookahead", lookahead, "Lookahead in encoder frames");
  lat->add_option("--frame-ms", frame_ms, "Encoder frame length in ms");
  lat->add_option("--out", out_dir, "Run directory with data/, vocab.txt and model.ckpt");
  lat->add_option("--beam", beam, "Beam width, 0 for greedy");
  lat->add_option("--jobs", jobs, "Decoding threads")->check(CLI::PositiveNumber);
  lat->add_option("--csv", csv_path, "Histogram CSV path (default <out>/latency_histogram.csv)");

  auto* ci = app.add_subcommand("compare-init", "Random vs CTC vs CE encoder initialization on matched seeds");
  auto* cl = app.add_subcommand("compare-lookahead", "tau = 0 vs tau > 0 encoders on matched seeds");
  for (auto* sub : {ci, cl}) {
    sub->add_option("--config", config_path, "Experiment config (synth/train/decode sections)");
    sub->add_option("--out", out_dir, "Directory for the CSV table");
    sub->add_option("--seed", seed, "First seed");
    sub->add_option("--seeds", seeds, "Number of matched seeds")->check(CLI::PositiveNumber);
    sub->add_option("--jobs", jobs, "Decoding threads")->check(CLI::PositiveNumber);
  }
  cl->add_option("--tau", tau, "Context frames per layer")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigExit;
  }

  try {
    if (*run) {
      ExperimentConfig cfg = load_experiment_config(config_path);
      if (seed) cfg.set_seed(*seed);
      cfg.lab.jobs = jobs;
      cfg.out = out_dir.empty() ? default_out(fs::path(config_path).stem().string()) : fs::path(out_dir);
      run_experiment(cfg, std::cerr);
      std::cout << (cfg.out / "report.csv").string() << "\n";
    } else if (*tok) {
      const Vocabulary vocab = vocab_path.empty() ? example_vocab() : Vocabulary::load(vocab_path);
      const SchemeCounts c = scheme_token_counts(text, vocab);
      const std::string table = "marker,delimiter\n" + std::to_string(c.marker_count) + "," +
                                std::to_string(c.delimiter_count) + "\n";
      std::cout << table;
      if (!csv_path.empty()) write_csv(csv_path, table);
    } else if (*mem) {
      const auto bytes = lattice_memory_bytes(frames, labels, vocab_classes, bytes_per);
      const std::string table = "frames,labels,vocab,bytes_per,bytes\n" + std::to_string(frames) + "," +
                                std::to_string(labels) + "," + std::to_string(vocab_classes) + "," +
                                std::to_string(bytes_per) + "," + std::to_string(bytes) + "\n";
      std::cout << table;
      if (!csv_path.empty()) write_csv(csv_path, table);
    } else if (*lat) {
      if (gap) {
        std::cout << "gap_frames,lookahead_frames,frame_ms,latency_ms\n"
                  << *gap << "," << lookahead << "," << frame_ms << "," << latency_ms(*gap, lookahead, frame_ms)
                  << "\n";
        return 0;
      }
      if (out_dir.empty()) throw ConfigError("latency: give --gap or --out");
      const fs::path dir = out_dir;
      const ModelParams model = ModelParams::load(dir / "model.ckpt");
      const Vocabulary vocab = Vocabulary::load(dir / "vocab.txt");
      const auto test = prepare_examples(read_corpus(dir / "data" / "test"), vocab, model.arch);
      const auto hyps = decode_best(model, test, beam, jobs);
      const DelayStats ds = score_delay(hyps, test, vocab, model.arch.stack_factor);
      std::ostringstream table;
      write_histogram_csv(table, delay_histogram(ds.gaps, 1));
      std::cout << table.str();
      std::cerr << "measured " << ds.measured_utterances << " utterances, skipped " << ds.skipped_utterances
                << ", mean gap " << ds.mean_gap << " input frames\n";
      write_csv(csv_path.empty() ? dir / "latency_histogram.csv" : fs::path(csv_path), table.str());
    } else if (*ci || *cl) {
      ExperimentConfig cfg = load_config(config_path);
      cfg.lab.jobs = jobs;
      const auto list = seed_list(seed.value_or(1), seeds);
      const LabData data = build_lab_data(cfg.lab);
      std::ostringstream table;
      std::string name;
      if (*ci) {
        write_init_csv(table, compare_init(cfg.lab, data, list));
        name = "compare_init.csv";
      } else {
        write_lookahead_csv(table, compare_lookahead(cfg.lab, data, tau, list));
        name = "compare_lookahead.csv";
      }
      std::cout << table.str();
      write_csv((out_dir.empty() ? default_out("compare") : fs::path(out_dir)) / name, table.str());
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStageExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStageExit;
  }
  return 0;
}
