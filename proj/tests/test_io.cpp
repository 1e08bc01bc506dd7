// Copyright 2026 The negmerge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// safetensors container, adapter checkpoints, module grid, merged-delta files
// and the mask codec.

#include <fstream>
#include <set>

#include "mask_codec.hpp"
#include "safetensors.hpp"
#include "test_util.hpp"

using namespace negmerge;
using namespace negmerge::testing;
namespace st = negmerge::safetensors;

namespace {

void write_raw(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

std::string header_file(const std::string& header) {
  std::string s(8, '\0');
  std::uint64_t n = header.size();
  std::memcpy(s.data(), &n, 8);
  return s + header;
}

// Brute force: sort indices by (z desc, index asc), take the budget, keep z > 0.
FlatMask brute_map(const Vector& z, double k) {
  const auto n = static_cast<std::size_t>(z.size());
  FlatMask m(n, 0);
  const std::size_t budget = prune_budget(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (z[j] > z[i] || (z[j] == z[i] && j < i)) ++ahead;
    }
    if (ahead < budget && z[i] > 0) m[i] = 1;
  }
  return m;
}

}  // namespace

TEST_SUITE("safetensors") {
  TEST_CASE("round trip preserves tensors, dtypes and metadata") {
    TempDir dir;
    std::mt19937_64 gen(1);
    st::File f;
    const Matrix m = f32_matrix(gen, 3, 5);
    f.tensors["w"] = st::Tensor::from_matrix_f32(m);
    f.tensors["ids"] = st::Tensor::from_i64({4, -2, 9});
    f.metadata["note"] = "hello";
    st::write(dir / "x.safetensors", f);
    const auto g = st::read(dir / "x.safetensors");
    CHECK(g.metadata.at("note") == "hello");
    CHECK(max_abs_diff(g.at("w").to_matrix(), m) == 0.0);
    CHECK(g.at("ids").to_i64() == std::vector<std::int64_t>{4, -2, 9});
    CHECK(g.at("w").shape == std::vector<std::int64_t>{3, 5});
  }

  TEST_CASE("header is padded to 8 bytes and writes are deterministic") {
    TempDir dir;
    st::File f;
    f.tensors["a"] = st::Tensor::from_i64({1});
    st::write(dir / "a.st", f);
    st::write(dir / "b.st", f);
    std::ifstream a(dir / "a.st", std::ios::binary), b(dir / "b.st", std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
    std::uint64_t n = 0;
    std::memcpy(&n, sa.data(), 8);
    CHECK(n % 8 == 0);
  }

  TEST_CASE("corrupt files are rejected with distinct codes") {
    TempDir dir;
    CHECK(error_code_of([&] { st::read(dir / "missing.st"); }) == ErrorCode::io);
    write_raw(dir / "short.st", "abc");
    CHECK(error_code_of([&] { st::read(dir / "short.st"); }) == ErrorCode::io);
    write_raw(dir / "json.st", header_file("{not json"));
    CHECK(error_code_of([&] { st::read(dir / "json.st"); }) == ErrorCode::schema);
    write_raw(dir / "off.st", header_file(R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})"));
    CHECK(error_code_of([&] { st::read(dir / "off.st"); }) == ErrorCode::schema);
    write_raw(dir / "dt.st", header_file(R"({"w":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}})") + "xx");
    CHECK(error_code_of([&] { st::read(dir / "dt.st"); }) == ErrorCode::unsupported);
  }

  TEST_CASE("f64 tensors load as matrices") {
    TempDir dir;
    st::Tensor t;
    t.dtype = st::DType::f64;
    t.shape = {1, 2};
    const double v[2] = {0.1, -7.25};
    t.bytes.resize(16);
    std::memcpy(t.bytes.data(), v, 16);
    st::File f;
    f.tensors["d"] = t;
    st::write(dir / "d.st", f);
    const Matrix m = st::read(dir / "d.st").at("d").to_matrix();
    CHECK(m(0, 0) == 0.1);
    CHECK(m(0, 1) == -7.25);
  }
}

TEST_SUITE("adapter_store") {
  TEST_CASE("checkpoint metadata follows from tensor shapes") {
    TempDir dir;
    std::mt19937_64 gen(2);
    auto c = random_adapter(gen, "snli", 2, 16, 64, 64);
    save_adapter(dir / "a.safetensors", c);
    std::filesystem::remove(dir / "meta.json");
    const auto loaded = load_adapter(dir / "a.safetensors");
    CHECK(loaded.num_layers() == 2);
    CHECK(loaded.rank == 16);
    CHECK(loaded.alpha == 16.0);
    CHECK(loaded.scale() == 1.0);
    CHECK(loaded.task_name == "a");
    for (std::size_t l = 0; l < 2; ++l) {
      for (Projection p : kProjections) {
        CHECK(max_abs_diff(loaded.layers[l][p].a, c.layers[l][p].a) == 0.0);
        CHECK(max_abs_diff(loaded.layers[l][p].b, c.layers[l][p].b) == 0.0);
      }
    }
  }

  TEST_CASE("meta.json supplies alpha and the task name") {
    TempDir dir;
    std::mt19937_64 gen(3);
    auto c = random_adapter(gen, "rte", 1, 4, 8, 8);
    c.alpha = 8;
    save_adapter(dir / "a.safetensors", c);
    const auto loaded = load_adapter(dir / "a.safetensors");
    CHECK(loaded.task_name == "rte");
    CHECK(loaded.alpha == 8.0);
    CHECK(loaded.scale() == 2.0);
  }

  TEST_CASE("a directory resolves to the adapter file inside it") {
    TempDir dir;
    std::mt19937_64 gen(4);
    const auto c = random_adapter(gen, "qnli", 1, 2, 4, 4);
    std::filesystem::create_directories(dir / "qnli" / "x");
    save_adapter(dir / "qnli" / "adapter_model.safetensors", c);
    std::filesystem::remove(dir / "qnli" / "meta.json");
    CHECK(load_adapter(dir / "qnli").task_name == "qnli");
    save_adapter(dir / "qnli" / "adapter.safetensors", random_adapter(gen, "other", 2, 2, 4, 4));
    CHECK(load_adapter(dir / "qnli").num_layers() == 2);  // adapter.safetensors wins
    CHECK(error_code_of([&] { load_adapter(dir / "qnli" / "x"); }) == ErrorCode::io);
  }

  TEST_CASE("missing tensor is reported by layer, projection and factor") {
    TempDir dir;
    std::mt19937_64 gen(4);
    const auto c = random_adapter(gen, "t", 2, 2, 4, 4);
    save_adapter(dir / "a.safetensors", c);
    auto f = st::read(dir / "a.safetensors");
    f.tensors.erase("layers.1.v.lora_A");
    st::write(dir / "a.safetensors", f);
    try {
      load_adapter(dir / "a.safetensors");
      FAIL("expected a schema error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::schema);
      CHECK(std::string(e.what()).find("layer 1, v, A") != std::string::npos);
    }
  }

  TEST_CASE("inconsistent rank is a shape error") {
    TempDir dir;
    std::mt19937_64 gen(5);
    auto c = random_adapter(gen, "t", 1, 2, 4, 4);
    c.layers[0][Projection::k].a = f32_matrix(gen, 3, 4);
    c.layers[0][Projection::k].b = f32_matrix(gen, 4, 3);
    save_adapter(dir / "a.safetensors", c);
    CHECK(error_code_of([&] { load_adapter(dir / "a.safetensors"); }) == ErrorCode::shape);
  }

  TEST_CASE("PEFT tensor names load through the preset and a custom pattern") {
    TempDir dir;
    std::mt19937_64 gen(6);
    const auto c = random_adapter(gen, "t", 2, 2, 4, 4);
    st::File f;
    const std::map<Projection, std::string> peft_name = {
        {Projection::q, "q_proj"}, {Projection::k, "k_proj"}, {Projection::v, "v_proj"}, {Projection::o, "o_proj"}};
    const std::map<Projection, std::string> custom_name = {
        {Projection::q, "query"}, {Projection::k, "key"}, {Projection::v, "value"}, {Projection::o, "dense"}};
    st::File g;
    for (std::size_t l = 0; l < 2; ++l) {
      for (Projection p : kProjections) {
        const std::string base = "base_model.model.model.layers." + std::to_string(l) + ".self_attn." + peft_name.at(p);
        f.tensors[base + ".lora_A.weight"] = st::Tensor::from_matrix_f32(c.layers[l][p].a);
        f.tensors[base + ".lora_B.weight"] = st::Tensor::from_matrix_f32(c.layers[l][p].b);
        const std::string cb = "enc." + std::to_string(l) + "." + custom_name.at(p);
        g.tensors[cb + ".A"] = st::Tensor::from_matrix_f32(c.layers[l][p].a);
        g.tensors[cb + ".B"] = st::Tensor::from_matrix_f32(c.layers[l][p].b);
      }
    }
    st::write(dir / "peft.safetensors", f);
    st::write(dir / "custom.safetensors", g);
    const auto a = load_adapter(dir / "peft.safetensors", NamingScheme::peft());
    CHECK(max_abs_diff(a.layers[1][Projection::o].b, c.layers[1][Projection::o].b) == 0.0);
    const auto naming = NamingScheme::from_json(nlohmann::json{
        {"pattern", R"(^enc\.(\d+)\.(query|key|value|dense)\.(A|B)$)"},
        {"layer_group", 1},
        {"proj_group", 2},
        {"factor_group", 3},
        {"proj_alias", {{"query", "q"}, {"key", "k"}, {"value", "v"}, {"dense", "o"}}}});
    const auto b = load_adapter(dir / "custom.safetensors", naming);
    CHECK(max_abs_diff(b.layers[0][Projection::v].a, c.layers[0][Projection::v].a) == 0.0);
    CHECK(error_code_of([&] { load_adapter(dir / "custom.safetensors"); }) == ErrorCode::schema);
    CHECK(error_code_of([&] { NamingScheme::from_json({{"preset", "nope"}}); }) == ErrorCode::config);
    CHECK(error_code_of([&] { NamingScheme::from_json({{"pattern", "x"}, {"colour", 1}}); }) == ErrorCode::config);
  }

  TEST_CASE("delta_matrix is the scaled product") {
    AdapterCheckpoint c;
    c.rank = 1;
    c.alpha = 1;
    c.layers.resize(1);
    for (Projection p : kProjections) {
      c.layers[0][p].a = Matrix::Zero(1, 2);
      c.layers[0][p].b = Matrix::Zero(2, 1);
    }
    c.layers[0][Projection::q].b << 1, 0;
    c.layers[0][Projection::q].a << 2, 3;
    Matrix expect(2, 2);
    expect << 2, 3, 0, 0;
    CHECK(max_abs_diff(delta_matrix(c, 0, Projection::q), expect) == 0.0);
    CHECK(delta_matrix(c, 0, Projection::k).isZero(0.0));
    CHECK(error_code_of([&] { delta_matrix(c, 1, Projection::q); }) == ErrorCode::invalid_argument);

    std::mt19937_64 gen(7);
    const auto r = random_adapter(gen, "t", 1, 16, 24, 20);
    const Matrix direct = r.layers[0][Projection::v].b * r.layers[0][Projection::v].a;
    CHECK(max_abs_diff(delta_matrix(r, 0, Projection::v), direct) == 0.0);
  }

  TEST_CASE("module grid dimensions and flattening") {
    std::mt19937_64 gen(8);
    std::vector<AdapterCheckpoint> cs;
    for (int t = 0; t < 6; ++t) cs.push_back(random_adapter(gen, "t" + std::to_string(t), 32, 1, 2, 2));
    const auto grid = ModuleGrid::build(cs);
    CHECK(grid.num_units() == 192);
    CHECK(grid.flatten(3, 4) == 22);
    CHECK(grid.unflatten(22) == std::pair<std::size_t, std::size_t>{3, 4});
    CHECK(max_abs_diff(grid.delta(5, 2, Projection::o), delta_matrix(cs[2], 5, Projection::o)) == 0.0);
    CHECK(max_abs_diff(grid.scaled_b(5, 2, Projection::o) * grid.a(5, 2, Projection::o),
                       grid.delta(5, 2, Projection::o)) < 1e-12);
  }

  TEST_CASE("single-task grid is legal") {
    std::mt19937_64 gen(9);
    const auto grid = ModuleGrid::build({random_adapter(gen, "only", 4, 2, 3, 3)});
    CHECK(grid.num_units() == 4);
  }

  TEST_CASE("structural mismatches are rejected") {
    std::mt19937_64 gen(10);
    CHECK(error_code_of([&] {
            ModuleGrid::build({random_adapter(gen, "a", 2, 2, 4, 4), random_adapter(gen, "b", 3, 2, 4, 4)});
          }) == ErrorCode::shape);
    CHECK(error_code_of([&] {
            ModuleGrid::build({random_adapter(gen, "a", 2, 2, 4, 4), random_adapter(gen, "b", 2, 2, 5, 4)});
          }) == ErrorCode::shape);
    // Ranks may differ across tasks.
    CHECK_NOTHROW(ModuleGrid::build({random_adapter(gen, "a", 2, 2, 4, 4), random_adapter(gen, "b", 2, 3, 4, 4)}));
  }

  TEST_CASE("merged delta round trip keeps tensors and manifest") {
    TempDir dir;
    std::mt19937_64 gen(11);
    MergedDelta d;
    d.layers.resize(2);
    for (auto& layer : d.layers) {
      for (auto& m : layer) m = f32_matrix(gen, 5, 4);
    }
    const nlohmann::json manifest = {{"merge", {{"method", "ties"}, {"lambda", 1.2}}}};
    save_delta(dir / "m.safetensors", d, manifest);
    const auto loaded = load_delta(dir / "m.safetensors");
    CHECK(loaded.manifest.at("merge").at("method") == "ties");
    CHECK(loaded.manifest.at("merge").at("lambda").get<double>() == 1.2);
    REQUIRE(loaded.delta.layers.size() == 2);
    for (std::size_t l = 0; l < 2; ++l) {
      for (Projection p : kProjections) CHECK(max_abs_diff(loaded.delta.at(l, p), d.at(l, p)) == 0.0);
    }
    CHECK(error_code_of([&] { save_delta(dir / "no/such/dir/m.safetensors", d, manifest); }) == ErrorCode::io);
  }
}

TEST_SUITE("mask_codec") {
  TEST_CASE("prune budget floors with tolerance") {
    CHECK(prune_budget(192, 0.2) == 38);
    CHECK(prune_budget(192, 0.167) == 32);
    CHECK(prune_budget(100, 0.29) == 29);
    CHECK(prune_budget(9, 0.4) == 3);
    CHECK(prune_budget(5, 0.0) == 0);
  }

  TEST_CASE("map_latent hand example") {
    Vector z(5);
    z << 0.3, -0.5, 0.7, 0.1, -2.0;
    CHECK(map_latent(z, 0.4) == FlatMask{1, 0, 1, 0, 0});
  }

  TEST_CASE("conservative latent and zero budget give the zero mask") {
    const Vector neg = Vector::Constant(192, -1.0);
    for (double k : {0.0, 0.1, 0.5, 0.9}) CHECK(map_latent(neg, k) == FlatMask(192, 0));
    const Vector pos = Vector::Constant(10, 3.0);
    CHECK(map_latent(pos, 0.0) == FlatMask(10, 0));
  }

  TEST_CASE("ties break toward the lower index and non-positive entries stay") {
    Vector z(4);
    z << 1.0, 1.0, 1.0, 0.0;
    CHECK(map_latent(z, 0.5) == FlatMask{1, 1, 0, 0});
    z << 0.0, 0.0, 2.0, 0.0;
    CHECK(map_latent(z, 0.75) == FlatMask{0, 0, 1, 0});
    CHECK(error_code_of([&] { map_latent(z, 1.0); }) == ErrorCode::invalid_argument);
    CHECK(error_code_of([&] { map_latent(z, -0.1); }) == ErrorCode::invalid_argument);
  }

  TEST_CASE("map_latent agrees with the brute-force reference") {
    std::mt19937_64 gen(12);
    std::normal_distribution<double> nd;
    std::uniform_int_distribution<int> coarse(-3, 3);
    for (int trial = 0; trial < 200; ++trial) {
      Vector z(37);
      for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = trial % 2 ? nd(gen) : coarse(gen) * 0.5;
      for (double k : {0.0, 0.1, 0.3, 0.6, 0.95}) {
        const auto m = map_latent(z, k);
        CHECK(m == brute_map(z, k));
        CHECK(std::count(m.begin(), m.end(), 1) <= static_cast<long>(prune_budget(37, k)));
      }
    }
  }

  TEST_CASE("reshape indexing and round trip") {
    const auto m = reshape_mask({0, 1, 0, 0, 0, 1}, 2, 3);
    CHECK(m.at(0, 1));
    CHECK(m.at(1, 2));
    CHECK(m.popcount() == 2);
    CHECK(reshape_mask(FlatMask(6, 1), 2, 3).popcount() == 6);
    std::mt19937_64 gen(13);
    for (int i = 0; i < 100; ++i) {
      FlatMask f(24);
      for (auto& b : f) b = gen() & 1;
      CHECK(flatten_mask(reshape_mask(f, 6, 4)) == f);
    }
    CHECK(error_code_of([] { reshape_mask(FlatMask(5, 0), 2, 3); }) == ErrorCode::shape);
  }

  TEST_CASE("mask file round trip and parse errors") {
    TempDir dir;
    std::mt19937_64 gen(14);
    FlatMask f(192);
    for (auto& b : f) b = gen() & 1;
    const auto m = reshape_mask(f, 32, 6);
    const std::vector<std::string> tasks = {"snli", "mnli", "sick", "qnli", "rte", "scitail"};
    write_mask(dir / "m.json", m, tasks);
    CHECK(read_mask(dir / "m.json") == m);

    nlohmann::json j = mask_to_json(reshape_mask({0, 1, 0, 0, 0, 1}, 2, 3), {"a", "b", "c"});
    CHECK(j.at("rows") == nlohmann::json{"010", "001"});
    auto bad_len = j;
    bad_len["rows"][1] = "01";
    CHECK(error_code_of([&] { mask_from_json(bad_len); }) == ErrorCode::schema);
    auto bad_char = j;
    bad_char["rows"][0] = "0x0";
    CHECK(error_code_of([&] { mask_from_json(bad_char); }) == ErrorCode::schema);
    write_raw(dir / "junk.json", "{");
    CHECK(error_code_of([&] { read_mask(dir / "junk.json"); }) == ErrorCode::schema);
  }
}
