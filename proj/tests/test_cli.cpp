#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rtnlinv/autotune.hpp"
#include "rtnlinv/ingest.hpp"
#include "rtnlinv/metrics.hpp"
#include "rtnlinv/planner.hpp"

using namespace rtnlinv;

namespace {

// exit code of the installed binary run with the given arguments
int cli(const std::string& args, const std::string& stdout_file = "") {
  std::string cmd = std::string(RTNLINV_BIN_PATH) + " " + args;
  if (stdout_file.empty()) {
    cmd += " > /dev/null 2>&1";
  } else {
    cmd += " > " + stdout_file + " 2> /dev/null";
  }
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), path.c_str());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// one small dataset shared by the reconstruction cases, generated once
const std::string& small_dataset() {
  static const std::string path = [] {
    const std::string p = "tmp_cli_small.rtk";
    REQUIRE(cli("phantom --out " + p + " --n 24 --j 2 --k 5 --u 2 --frames 4") == 0);
    return p;
  }();
  return path;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(cli("") == 2);                       // a subcommand is required
  CHECK(cli("transmogrify") == 2);           // unknown subcommand
  CHECK(cli("phantom") == 2);                // missing required --out
  CHECK(cli("phantom --out x.rtk --n 0") == 2);
  CHECK(cli("--help") == 0);
  CHECK(cli("reconstruct --help") == 0);

  // (T, A) and autotuning are mutually exclusive
  CHECK(cli("reconstruct --in a.rtk --out a.rti -T 2 --autotune") == 2);
  CHECK(cli("reconstruct --in a.rtk --out a.rti -A 2 --learn") == 2);

  // phantom-level shape errors
  CHECK(cli("phantom --out tmp_cli_x.rtk --mode flow --frames 3") == 2);
  CHECK(cli("phantom --out tmp_cli_x.rtk --slices 2") == 2);
  CHECK(cli("phantom --out tmp_cli_x.rtk --mode multi_slice --slices 1") == 2);
  std::remove("tmp_cli_x.rtk");
}

TEST_CASE("phantom writes a readable dataset") {
  RtkReader r(small_dataset());
  CHECK(r.header().N == 24);
  CHECK(r.header().J_physical == 2);
  CHECK(r.header().K == 5);
  CHECK(r.header().U == 2);
  CHECK(r.header().frames == 4);
  CHECK(r.header().slices == 1);
  CHECK(r.header().mode == ImagingMode::single_slice);
  CHECK(r.header().samples_per_spoke == 48);
  KSpaceFrame f;
  int count = 0;
  while (r.read_frame(f)) ++count;
  CHECK(count == 4);
}

TEST_CASE("reconstruct produces an ordered image series") {
  const std::string out = "tmp_cli_rec.rti";
  REQUIRE(cli("reconstruct --in " + small_dataset() + " --out " + out +
              " --newton 2 --cg-tol 0.01") == 0);
  RtiReader r(out);
  REQUIRE(r.records().size() == 4);
  for (int n = 0; n < 4; ++n) {
    const ImageOut img = r.read_image(static_cast<size_t>(n));
    CHECK(img.frame_index == n);
    CHECK(img.kind == ImageKind::magnitude);
    REQUIRE(img.pixels.size() == 24u * 24u);
    for (float p : img.pixels) {
      REQUIRE(std::isfinite(p));
      REQUIRE(p >= 0.0f);
    }
  }
  std::remove(out.c_str());
  std::remove((out + ".idx").c_str());
}

TEST_CASE("reconstruction output is deterministic across runs") {
  const std::string args = "reconstruct --in " + small_dataset() + " --newton 2 --cg-tol 0.01";
  REQUIRE(cli(args + " --out tmp_cli_d1.rti") == 0);
  REQUIRE(cli(args + " --out tmp_cli_d2.rti") == 0);
  CHECK(slurp("tmp_cli_d1.rti") == slurp("tmp_cli_d2.rti"));
  // index files differ only in the path-free fields, so they match too
  CHECK(slurp("tmp_cli_d1.rti.idx") == slurp("tmp_cli_d2.rti.idx"));
  for (const char* p : {"tmp_cli_d1.rti", "tmp_cli_d2.rti"}) {
    std::remove(p);
    std::remove((std::string(p) + ".idx").c_str());
  }
}

TEST_CASE("the json report carries the run summary") {
  const std::string out = "tmp_cli_json.rti";
  const std::string rep = "tmp_cli_report.json";
  REQUIRE(cli("reconstruct --in " + small_dataset() + " --out " + out +
              " --newton 2 --cg-tol 0.01 -T 2 --baseline-ms 100 --report json",
              rep) == 0);
  const nlohmann::json j = nlohmann::json::parse(slurp(rep));
  CHECK(j["frames_in"] == 4);
  CHECK(j["images_out"] == 4);
  CHECK(j["T"] == 2);
  CHECK(j["A"] == 1);
  CHECK(j["prologue_frames"] == 4);
  CHECK(j["epilogue_frames"] == 4);
  CHECK(j["fps"].get<double>() > 0);
  CHECK(j["per_frame_ms"].get<double>() > 0);
  CHECK(j["stages"]["rec"]["processed"] == 4);
  CHECK(j["stages"]["snk"]["processed"] == 4);
  CHECK(j["fft"]["normal_op"].get<uint64_t>() > 0);
  CHECK(j["data_scale"].get<double>() > 0);
  // S = baseline / measured, E = S / (T * A), both present when asked for
  CHECK(j.contains("speedup"));
  CHECK(j.contains("efficiency"));
  const double s = j["speedup"].get<double>();
  const double e = j["efficiency"].get<double>();
  CHECK(e == doctest::Approx(s / 2.0).epsilon(1e-9));
  std::remove(out.c_str());
  std::remove((out + ".idx").c_str());
  std::remove(rep.c_str());
}

TEST_CASE("flow datasets reconstruct to phase-difference pairs") {
  const std::string data = "tmp_cli_flow.rtk";
  const std::string out = "tmp_cli_flow.rti";
  REQUIRE(cli("phantom --out " + data +
              " --n 24 --j 2 --k 5 --u 2 --frames 4 --mode flow --flow-phase 0.5") == 0);
  REQUIRE(cli("reconstruct --in " + data + " --out " + out + " --newton 2 --cg-tol 0.01") == 0);
  RtiReader r(out);
  REQUIRE(r.records().size() == 2);
  for (int p = 0; p < 2; ++p) {
    const ImageOut img = r.read_image(static_cast<size_t>(p));
    CHECK(img.kind == ImageKind::phase_difference);
    CHECK(img.frame_index == p);
  }
  std::remove(data.c_str());
  std::remove(out.c_str());
  std::remove((out + ".idx").c_str());
}

TEST_CASE("data errors exit with code 3") {
  CHECK(cli("reconstruct --in tmp_cli_missing.rtk --out tmp_cli_m.rti") == 3);

  // truncate a valid dataset mid-frame
  const std::string whole = slurp(small_dataset());
  const std::string cut = "tmp_cli_cut.rtk";
  {
    std::ofstream out(cut, std::ios::binary);
    out.write(whole.data(), static_cast<std::streamsize>(whole.size() - 40));
  }
  CHECK(cli("reconstruct --in " + cut + " --out tmp_cli_cut.rti --newton 1") == 3);
  std::remove(cut.c_str());
  std::remove("tmp_cli_cut.rti");
  std::remove("tmp_cli_cut.rti.idx");

  CHECK(cli("tune-report --db tmp_cli_nodb.tsv --mode spiral --n 24 --frames 4 --j 2") == 3);
}

TEST_CASE("a learning sweep walks the configuration space and is reusable") {
  const std::string db = "tmp_cli_learn.tsv";
  std::remove(db.c_str());
  const std::string base = "reconstruct --in " + small_dataset() +
                           " --out tmp_cli_learn.rti --newton 1 --cg-tol 0.1 --tune-db " + db +
                           " --total-workers 2 --learn";
  for (int i = 0; i < 3; ++i) REQUIRE(cli(base) == 0);

  TuneDb store(db);
  const std::vector<TuningRecord> recs = store.load();
  REQUIRE(recs.size() == 3);
  // canonical order for a 2-worker budget: (1,1), (2,1), (1,2)
  CHECK(recs[0].T == 1);
  CHECK(recs[0].A == 1);
  CHECK(recs[1].T == 2);
  CHECK(recs[1].A == 1);
  CHECK(recs[2].T == 1);
  CHECK(recs[2].A == 2);
  for (const TuningRecord& r : recs) {
    CHECK(r.key.mode == ImagingMode::single_slice);
    CHECK(r.key.N == 24);
    CHECK(r.key.bucket == frames_bucket(4));
    CHECK(r.key.J == 2);
    CHECK(r.runtime_ms > 0);
  }

  // the recorded measurements now drive selection
  REQUIRE(cli("reconstruct --in " + small_dataset() +
              " --out tmp_cli_learn.rti --newton 1 --cg-tol 0.1 --tune-db " + db +
              " --autotune") == 0);

  const std::string rep = "tmp_cli_tune_report.txt";
  REQUIRE(cli("tune-report --db " + db, rep) == 0);
  CHECK(slurp(rep).find("3 records") != std::string::npos);
  REQUIRE(cli("tune-report --db " + db + " --mode single_slice --n 24 --frames 4 --j 2",
              rep) == 0);
  const std::pair<int, int> want = select_config(
      ProtocolKey{ImagingMode::single_slice, 24, frames_bucket(4), 2}, recs);
  CHECK(slurp(rep).find("T=" + std::to_string(want.first) +
                        " A=" + std::to_string(want.second)) != std::string::npos);

  std::remove(db.c_str());
  std::remove(rep.c_str());
  std::remove("tmp_cli_learn.rti");
  std::remove("tmp_cli_learn.rti.idx");
}

TEST_CASE("an empty database reports cleanly and selects the default") {
  const std::string rep = "tmp_cli_empty_report.txt";
  REQUIRE(cli("tune-report --db tmp_cli_nodb.tsv", rep) == 0);
  CHECK(slurp(rep).find("0 records") != std::string::npos);
  REQUIRE(cli("tune-report --db tmp_cli_nodb.tsv --mode flow --n 24 --frames 4 --j 2", rep) == 0);
  CHECK(slurp(rep).find("T=1 A=1") != std::string::npos);
  std::remove(rep.c_str());
}

TEST_CASE("a measured transform table feeds grid planning") {
  const std::string table = "tmp_cli_fft.tsv";
  REQUIRE(cli("bench-fft --lo 60 --hi 80 --trials 1 --out " + table) == 0);
  const FftLookupTable t = load_table(table);
  CHECK(t.entries_us.size() == 21);
  for (const auto& [size, us] : t.entries_us) {
    CHECK(size >= 60);
    CHECK(size <= 80);
    CHECK(us > 0);
  }
  // N = 24 with gamma in [1.4, 1.6] searches even grids 68..76, all measured
  REQUIRE(cli("reconstruct --in " + small_dataset() + " --out tmp_cli_fft.rti" +
              " --newton 1 --cg-tol 0.1 --gamma-max 1.6 --fft-table " + table) == 0);
  // a table that stops short of the search window is a usage error
  CHECK(cli("reconstruct --in " + small_dataset() + " --out tmp_cli_fft.rti" +
            " --newton 1 --fft-table " + table) == 2);
  std::remove(table.c_str());
  std::remove("tmp_cli_fft.rti");
  std::remove("tmp_cli_fft.rti.idx");
}

TEST_CASE("speedup and efficiency match the measured fixture") {
  // two-worker run: 555 us single, 288 us parallel
  const double s = speedup(555.0, 288.0);
  CHECK(s == doctest::Approx(1.93).epsilon(0.005));
  CHECK(efficiency(s, 2) == doctest::Approx(0.96).epsilon(0.005));
  CHECK_THROWS_AS(speedup(0.0, 1.0), UsageError);
  CHECK_THROWS_AS(efficiency(-1.0, 2), UsageError);
  CHECK_THROWS_AS(efficiency(1.5, 0), UsageError);
}

TEST_CASE("cleanup of the shared dataset") {
  // last case in file order; doctest runs cases in declaration order by default
  std::remove(small_dataset().c_str());
  CHECK(true);
}
