// SPDX-License-Identifier: Apache-2.0
#include "monolex/cli.hpp"

int main(int argc, char** argv) { return monolex::cli::run(argc, argv); }
