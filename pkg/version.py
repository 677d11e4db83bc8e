NAME = 'fbsde-solvers'
# bumped whenever a binary header or the manifest layout changes
VERSION = 1


def format_version():
    return f'{NAME} v{VERSION}'
