#include "mpsynth/cli.hpp"

int main(int argc, char** argv)
{
    return mpsynth::dispatch(argc, argv);
}
