// SPDX-License-Identifier: Apache-2.0
//
// Regenerates fixtures/mock from the rule-based mock endpoints.
//   make_fixtures [out_dir] [world.json]
#include <iostream>

#include "mock_fixtures.hpp"

int main(int argc, char** argv) {
    const monolex::fs::path root = MONOLEX_SOURCE_DIR;
    const monolex::fs::path out = argc > 1 ? argv[1] : root / "fixtures" / "mock";
    const monolex::fs::path world = argc > 2 ? argv[2] : root / "fixtures" / "world.json";
    try {
        monolex::mock::write_fixtures(out, world);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    std::cout << "wrote " << out.string() << "\n";
}
