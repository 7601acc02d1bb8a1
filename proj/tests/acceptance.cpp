// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
//
//   acceptance --work-dir DIR [--only 3,9]

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adafocus/costmodel.hpp"
#include "adafocus/experiment.hpp"
#include "adafocus/serialize.hpp"

namespace fs = std::filesystem;
using namespace adafocus;

namespace {

struct Outcome {
  bool passed = false;
  std::string summary;
};

struct Criterion {
  int id;
  std::string title;
  std::function<Outcome()> run;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

std::string pct(double v) { return fmt(100.0 * v, 3) + "%"; }

class Runs {
 public:
  explicit Runs(fs::path root) : root_(std::move(root)) {}

  // Trains (once) and returns the run directory for a seed and variant.
  const RunDirectory& get(std::uint64_t seed, bool plus, const std::string& tag = "main") {
    const auto key = tag + (plus ? "+plus" : "") + "-" + std::to_string(seed);
    auto it = done_.find(key);
    if (it != done_.end()) return it->second;
    CommandContext ctx;
    ctx.config.seed = seed;
    ctx.config.runs_dir = (root_ / tag).string();
    if (plus) apply_override(ctx.config, "model.adafocus_plus=true");
    ctx.config.validate();
    ctx.dir = run_directory_for(ctx.config);
    ctx.overwrite = true;
    const auto t0 = std::chrono::steady_clock::now();
    std::cerr << "training " << key << " in " << ctx.dir.root.string() << std::endl;
    cmd_run_all(ctx);
    std::cerr << "  done in " << fmt(seconds_since(t0), 3) << " s" << std::endl;
    return done_.emplace(key, ctx.dir).first->second;
  }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

 private:
  fs::path root_;
  std::map<std::string, RunDirectory> done_;
};

std::vector<MetricsRecord> read_records(const fs::path& p) { return metrics_from_json(read_text(p)); }

const MetricsRecord& by_policy(const std::vector<MetricsRecord>& recs, const std::string& policy) {
  for (const auto& r : recs) {
    if (r.policy == policy) return r;
  }
  throw ContractError("no record for policy " + policy);
}

const MetricsRecord& by_eta(const std::vector<MetricsRecord>& recs, double eta) {
  for (const auto& r : recs) {
    if (r.eta && std::abs(*r.eta - eta) < 1e-12) return r;
  }
  throw ContractError("no sweep record for eta " + fmt(eta));
}

std::string range(const std::vector<double>& v) {
  double lo = v.front(), hi = v.front(), sum = 0.0;
  for (double x : v) lo = std::min(lo, x), hi = std::max(hi, x), sum += x;
  return pct(sum / v.size()) + " [" + pct(lo) + ", " + pct(hi) + "]";
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

std::set<int> parse_only(const std::string& text) {
  std::set<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.insert(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_runs";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      only = parse_only(argv[++i]);
    } else {
      std::cerr << "usage: acceptance [--work-dir DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::remove_all(work);
  fs::create_directories(work);
  Runs runs(work);
  const std::vector<std::uint64_t> seeds{0, 1, 2};

  std::vector<Criterion> criteria;

  criteria.push_back({1, "reward zero-mean over all candidates", [&] {
    const auto& dir = runs.get(0, false);
    const auto bundle = load_bundle(dir.checkpoint("stage3"));
    const auto split = load_split(dir.split(SplitRole::kTest));
    const auto r = reward_zero_mean_check(bundle, split, 50, 7);
    return Outcome{r.passed && bundle.grid.size() <= 25,
                   "K=" + std::to_string(bundle.grid.size()) + " max |mean reward| " + fmt(r.value) +
                       " over 50 triples (tol 1e-6)"};
  }});

  criteria.push_back({2, "gradient checks, 64-bit, 20 projections", [&] {
    GradCheckOptions o;
    o.projections = 20;
    bool ok = true;
    double worst = 0.0;
    std::string failed;
    const auto results = gradient_checks(o);
    for (const auto& r : results) {
      ok = ok && r.passed;
      worst = std::max(worst, r.value);
      if (!r.passed) failed += " " + r.name;
    }
    return Outcome{ok, std::to_string(results.size()) + " checks, worst rel. err " + fmt(worst) +
                           " (tol 1e-3)" + (failed.empty() ? "" : "; failed:" + failed)};
  }});

  criteria.push_back({3, "focus-network cost ratio at 96 vs 224", [&] {
    const double r = patch_cost_ratio(96, 224, nn::ConvBackboneSpec::default_focus(1));
    return Outcome{r >= 0.16 && r <= 0.21, "ratio " + fmt(r) + " (want [0.16, 0.21])"};
  }});

  criteria.push_back({4, "learned > random + 3 points, random >= central (3 seeds)", [&] {
    std::vector<double> learned, random, central;
    for (auto s : seeds) {
      const auto recs = read_records(runs.get(s, false).metrics("ablate_policies.json"));
      learned.push_back(by_policy(recs, "learned").top1);
      random.push_back(by_policy(recs, "random").top1);
      central.push_back(by_policy(recs, "central").top1);
    }
    const bool ok = mean(learned) >= mean(random) + 0.03 && mean(random) >= mean(central);
    return Outcome{ok, "learned " + range(learned) + ", random " + range(random) + ", central " +
                           range(central)};
  }});

  criteria.push_back({5, "glyph overlap: learned exceeds random by 10 points", [&] {
    std::vector<double> gap, learned, random;
    for (auto s : seeds) {
      const auto j = nlohmann::json::parse(read_text(runs.get(s, false).metrics("overlap.json")));
      learned.push_back(j.at("learned").get<double>());
      random.push_back(j.at("random").get<double>());
      gap.push_back(learned.back() - random.back());
    }
    const double worst = *std::min_element(gap.begin(), gap.end());
    return Outcome{worst >= 0.10, "learned " + range(learned) + ", random " + range(random) +
                                      ", smallest gap " + pct(worst)};
  }});

  criteria.push_back({6, "skip gate at eta 0.5: focus cost 50% +- 5%, drop <= 5 points", [&] {
    const auto recs = read_records(runs.get(0, true).metrics("sweep.json"));
    const auto& all = by_eta(recs, 1.0);
    const auto& half = by_eta(recs, 0.5);
    const double ratio = half.mean_focus / all.mean_focus;
    const double drop = all.top1 - half.top1;
    return Outcome{std::abs(ratio - 0.5) <= 0.05 && drop <= 0.05,
                   "focus cost " + pct(ratio) + " of all-keep, top-1 " + pct(all.top1) + " -> " +
                       pct(half.top1) + " (drop " + fmt(100.0 * drop, 3) + " points)"};
  }});

  criteria.push_back({7, "online vs offline final prediction, 100 samples", [&] {
    const auto& plain = runs.get(0, false);
    const auto test = load_split(plain.split(SplitRole::kTest));
    const auto r1 = online_offline_check(load_bundle(plain.checkpoint("stage3")), test, 100);
    const auto& plus = runs.get(0, true);
    const auto test_plus = load_split(plus.split(SplitRole::kTest));
    const auto r2 = online_offline_check(load_bundle(plus.checkpoint("calibrated")), test_plus, 100, true);
    return Outcome{r1.passed && r2.passed,
                   "max |diff| " + fmt(r1.value) + " plain, " + fmt(r2.value) + " with skip gate (tol 1e-6)"};
  }});

  criteria.push_back({8, "calibrated keep fraction in [eta, eta + 1/N]", [&] {
    const auto& plus = runs.get(0, true);
    auto bundle = load_bundle(plus.checkpoint("stage3"));
    const auto calib = load_split(plus.split(SplitRole::kCalibration));
    const std::vector<double> etas{0.9, 0.7, 0.5};
    bool ok = true;
    std::string detail;
    for (const auto& r : calibration_checks(bundle, calib, etas)) {
      ok = ok && r.passed;
      detail += (detail.empty() ? "" : "; ") + r.name + " " + r.detail;
    }
    return Outcome{ok, detail};
  }});

  criteria.push_back({9, "two-armed bandit reaches P(best) >= 0.95 in 200 updates", [&] {
    const auto r = bandit_check(0, 200);
    return Outcome{r.passed, "P(best arm) " + fmt(r.value)};
  }});

  criteria.push_back({10, "identical metrics files on a repeated run", [&] {
    const auto& a = runs.get(0, false);
    const auto& b = runs.get(0, false, "repeat");
    std::size_t compared = 0;
    std::vector<std::string> differing;
    for (const auto& e : fs::recursive_directory_iterator(a.root / "metrics")) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), a.root);
      ++compared;
      if (!fs::exists(b.root / rel) || read_file(e.path()) != read_file(b.root / rel)) {
        differing.push_back(rel.string());
      }
    }
    std::string detail = std::to_string(compared) + " metrics files compared";
    for (const auto& d : differing) detail += ", differs: " + d;
    return Outcome{differing.empty() && compared > 0, detail};
  }});

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.passed ? 0 : 1;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.title << " | "
              << o.summary << " | " << fmt(Runs::seconds_since(t0), 3) << " s" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criterion(s) failed")
            << std::endl;
  return failed == 0 ? 0 : 1;
}
