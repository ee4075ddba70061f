// Writes synthetic street scenes in the raw Cityscapes layout.
#include <CLI11/CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "sgi/dataset.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic fixture scenes"};
  std::string out;
  int count = 8;
  uint64_t seed = 0;
  std::string split = "train";
  app.add_option("--out", out, "Output root")->required();
  app.add_option("--count", count, "Number of scenes")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "Generator seed");
  app.add_option("--split", split, "train or val")->check(CLI::IsMember({"train", "val"}));
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    const auto sp = sgi::data::parse_split(split);
    for (int i = 0; i < count; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "%s_%02d", split.c_str(), i);
      sgi::data::save_scene(out, sgi::data::generate_fixture_scene(seed, id, sp));
    }
    std::cout << "wrote " << count << " scenes to " << out << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
